//! Relying Party supporting several IdPs, both grant flows, the client
//! library delivery mode, and switchable CSRF defences.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::browser::{Action, DocumentKind, Page};
use crate::guard::{
    evaluate, evaluate_state, expected_origins, AbsentMode, Decision, Disposition, RefererPolicy,
    RefererVerdict,
};
use crate::http::{HttpRequest, HttpResponse, Method, Origin, Uri};
use crate::idp::Endpoints;
use crate::net::{RequestRouter, Server};
use crate::rng::OpaqueGen;

pub const SESSION_COOKIE: &str = "Jsession";
pub const TOKEN_DELIVERY_PATH: &str = "/token-delivery";
pub const LOGIN_PATH: &str = "/login";

/// How the RP works out which IdP an authorization response belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "path", rename_all = "snake_case")]
pub enum Resolution {
    /// A callback path owned by this IdP alone.
    PerIdpCallback(String),
    /// One callback path for every IdP; the IdP is read from the session.
    SharedCallback(String),
}

impl Resolution {
    pub fn path(&self) -> &str {
        match self {
            Resolution::PerIdpCallback(p) | Resolution::SharedCallback(p) => p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flow {
    Code,
    Implicit,
    /// The IdP's JavaScript library hands the code to an RP page, which
    /// sends it to the callback by XHR.
    ClientLibrary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdpBinding {
    pub idp_id: String,
    /// Name used in page text, e.g. "AIdP".
    pub display_name: String,
    pub idp_origin: Origin,
    pub resolution: Resolution,
    pub client_id: String,
    #[serde(default)]
    pub client_secret: Option<String>,
    pub flow: Flow,
    #[serde(default = "default_scope")]
    pub scope: String,
}

fn default_scope() -> String {
    "openid".to_string()
}

impl IdpBinding {
    /// Page the IdP's client library delivers responses to.
    pub fn relay_path(&self) -> String {
        format!("/{}-relay", self.display_name)
    }

    /// The redirect_uri this binding registers at its IdP.
    pub fn redirect_uri(&self, rp_origin: &Origin) -> Uri {
        let path = match self.flow {
            Flow::ClientLibrary => self.relay_path(),
            Flow::Code | Flow::Implicit => self.resolution.path().to_string(),
        };
        rp_origin
            .at(&path)
            .expect("binding paths are validated when the RP is built")
    }

    fn response_type(&self) -> &'static str {
        match self.flow {
            Flow::Code | Flow::ClientLibrary => "code",
            Flow::Implicit => "token",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefenceConfig {
    pub referer_guard: bool,
    pub state_check: bool,
    /// Require `X-Requested-With` on client-library deliveries.
    pub custom_header_check: bool,
    pub absent_referer_mode: AbsentMode,
}

impl Default for DefenceConfig {
    fn default() -> Self {
        DefenceConfig {
            referer_guard: true,
            state_check: false,
            custom_header_check: false,
            absent_referer_mode: AbsentMode::FailClosed,
        }
    }
}

impl DefenceConfig {
    pub fn none() -> Self {
        DefenceConfig {
            referer_guard: false,
            state_check: false,
            custom_header_check: false,
            absent_referer_mode: AbsentMode::FailClosed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundIdentity {
    pub idp_id: String,
    pub subject: String,
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpSession {
    pub session_id: String,
    pub pending_idp: Option<String>,
    pub pending_state: Option<String>,
    pub logged_in_subject: Option<BoundIdentity>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpConfig {
    pub origin: Origin,
    pub bindings: Vec<IdpBinding>,
    #[serde(default)]
    pub defences: DefenceConfig,
    /// Endpoint paths per IdP id, where they differ from the defaults.
    #[serde(default)]
    pub idp_endpoints: BTreeMap<String, Endpoints>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RpError {
    #[error("IdP {0:?} is bound twice")]
    DuplicateIdp(String),
    #[error("callback path {0:?} is used by more than one binding")]
    DuplicatePath(String),
    #[error("more than one shared callback path")]
    MultipleSharedPaths,
    #[error("path {0:?} is reserved or not a valid absolute path")]
    BadPath(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallbackOutcome {
    /// Identity bound to the session.
    Completed,
    /// Implicit flow: the extractor page was served.
    ExtractorServed,
    CsrfRejected,
    AbsentRejected,
    MalformedRejected,
    /// Shared callback hit with no login in progress.
    NoIntention,
    StateMismatch,
    MissingCustomHeader,
    /// No code or token in the response.
    MissingCredential,
    /// The IdP sent an OAuth error response.
    IdpError,
    /// Token exchange or userinfo failed.
    UpstreamError,
    /// The binding's flow does not use this endpoint.
    WrongEndpoint,
}

impl CallbackOutcome {
    pub fn is_rejection(self) -> bool {
        !matches!(
            self,
            CallbackOutcome::Completed | CallbackOutcome::ExtractorServed
        )
    }
}

/// Audit record for one request to a callback or delivery endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpEvent {
    pub endpoint: String,
    pub idp: Option<String>,
    /// Verdict the guard reached, whether or not it was enforced.
    pub verdict: RefererVerdict,
    pub guard_enforced: bool,
    pub state_ok: Option<bool>,
    pub custom_header_ok: Option<bool>,
    pub outcome: CallbackOutcome,
    /// Accepted under `flag_only` with no usable Referer.
    pub flagged: bool,
    pub session_id: String,
    pub subject: Option<String>,
}

struct RpState {
    sessions: BTreeMap<String, RpSession>,
    events: Vec<RpEvent>,
    rng: OpaqueGen,
}

pub struct RelyingParty {
    config: RpConfig,
    state: Mutex<RpState>,
    backchannel: Arc<dyn RequestRouter>,
}

impl std::fmt::Debug for RelyingParty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RelyingParty")
            .field("origin", &self.config.origin)
            .field("defences", &self.config.defences)
            .finish()
    }
}

pub fn csrf_detected_body(display_name: &str) -> String {
    format!(
        "<html> <body> <h1>A CSRF attack is detected on the {display_name} signin endpoint!</h1> </body> </html>"
    )
}

pub const EXTRACTOR_BODY: &str =
    "<html> <body> <h1>This HTML can be used to extract the access_token!</h1> </body> </html>";
pub const ABSENT_REFERER_BODY: &str =
    "<html> <body> <h1>Sign-in refused: the request carried no usable Referer header.</h1> </body> </html>";
pub const NO_INTENTION_BODY: &str =
    "<html> <body> <h1>Sign-in refused: no login was started in this session.</h1> </body> </html>";
pub const STATE_MISMATCH_BODY: &str =
    "<html> <body> <h1>Sign-in refused: state parameter mismatch.</h1> </body> </html>";
pub const MISSING_HEADER_BODY: &str =
    "<html> <body> <h1>Sign-in refused: missing X-Requested-With header.</h1> </body> </html>";
pub const UPSTREAM_ERROR_BODY: &str =
    "<html> <body> <h1>Sign-in failed: the identity provider refused the credential.</h1> </body> </html>";
pub const BAD_RESPONSE_BODY: &str =
    "<html> <body> <h1>Sign-in failed: malformed authorization response.</h1> </body> </html>";

fn page(status: u16, body: impl Into<String>, kind: DocumentKind) -> HttpResponse {
    HttpResponse::html(status, body).with_page(Page::new(kind))
}

/// The guard's verdict on one request plus what the RP made of it.
struct GuardCheck {
    verdict: RefererVerdict,
    rejection: Option<CallbackOutcome>,
    flagged: bool,
}

struct Pending {
    binding: IdpBinding,
    verdict: RefererVerdict,
    state_ok: Option<bool>,
    custom_header_ok: Option<bool>,
    flagged: bool,
}

impl RelyingParty {
    pub fn new(
        config: RpConfig,
        backchannel: Arc<dyn RequestRouter>,
        seed: u64,
    ) -> Result<Self, RpError> {
        let mut ids = BTreeSet::new();
        let mut paths = BTreeSet::new();
        let reserved = ["/", LOGIN_PATH, TOKEN_DELIVERY_PATH];
        let mut shared: Option<&str> = None;
        for b in &config.bindings {
            if !ids.insert(b.idp_id.as_str()) {
                return Err(RpError::DuplicateIdp(b.idp_id.clone()));
            }
            let path = b.resolution.path();
            if reserved.contains(&path) || config.origin.at(path).is_err() {
                return Err(RpError::BadPath(path.to_string()));
            }
            match &b.resolution {
                Resolution::PerIdpCallback(p) => {
                    if !paths.insert(p.clone()) {
                        return Err(RpError::DuplicatePath(p.clone()));
                    }
                }
                Resolution::SharedCallback(p) => match shared {
                    Some(s) if s != p => return Err(RpError::MultipleSharedPaths),
                    _ => shared = Some(p),
                },
            }
            if b.flow == Flow::ClientLibrary {
                let relay = b.relay_path();
                if config.origin.at(&relay).is_err() || !paths.insert(relay.clone()) {
                    return Err(RpError::BadPath(relay));
                }
            }
        }
        if let Some(s) = shared {
            if paths.contains(s) {
                return Err(RpError::DuplicatePath(s.to_string()));
            }
        }
        Ok(RelyingParty {
            state: Mutex::new(RpState {
                sessions: BTreeMap::new(),
                events: Vec::new(),
                rng: OpaqueGen::for_actor(seed, "rp"),
            }),
            config,
            backchannel,
        })
    }

    pub fn config(&self) -> &RpConfig {
        &self.config
    }

    pub fn origin(&self) -> &Origin {
        &self.config.origin
    }

    pub fn defences(&self) -> DefenceConfig {
        self.config.defences
    }

    pub fn binding(&self, idp_id: &str) -> Option<&IdpBinding> {
        self.config.bindings.iter().find(|b| b.idp_id == idp_id)
    }

    pub fn session(&self, session_id: &str) -> Option<RpSession> {
        self.lock().sessions.get(session_id).cloned()
    }

    pub fn sessions(&self) -> Vec<RpSession> {
        self.lock().sessions.values().cloned().collect()
    }

    pub fn events(&self) -> Vec<RpEvent> {
        self.lock().events.clone()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, RpState> {
        self.state.lock().expect("rp state poisoned")
    }

    fn endpoint(&self, binding: &IdpBinding, pick: fn(&Endpoints) -> &str) -> Uri {
        let defaults = Endpoints::default();
        let eps = self
            .config
            .idp_endpoints
            .get(&binding.idp_id)
            .unwrap_or(&defaults);
        binding
            .idp_origin
            .at(pick(eps))
            .unwrap_or_else(|_| binding.idp_origin.root())
    }

    /// Session named by the request's cookie, creating one if there is none.
    /// The flag says whether a `Set-Cookie` is needed.
    fn session_for(&self, req: &HttpRequest) -> (String, bool) {
        let mut st = self.lock();
        if let Some(sid) = req.cookie(SESSION_COOKIE) {
            if st.sessions.contains_key(sid) {
                return (sid.to_string(), false);
            }
        }
        let sid = st.rng.opaque();
        st.sessions.insert(
            sid.clone(),
            RpSession {
                session_id: sid.clone(),
                pending_idp: None,
                pending_state: None,
                logged_in_subject: None,
            },
        );
        (sid, true)
    }

    fn home_page(&self, heading: &str) -> HttpResponse {
        let mut p = Page::new(DocumentKind::RpPage);
        let mut links = String::new();
        for b in &self.config.bindings {
            let target = self
                .config
                .origin
                .at(LOGIN_PATH)
                .expect("login path is valid")
                .append_query("idp", &b.idp_id);
            links.push_str(&format!(
                "<a href=\"{target}\">Sign in with {}</a>",
                b.display_name
            ));
            p = p.with_action(Action::link(&format!("login:{}", b.idp_id), target));
        }
        HttpResponse::html(
            200,
            format!("<html><body><h1>{heading}</h1>{links}</body></html>"),
        )
        .with_page(p)
    }

    /// Starts a login with `idp_id`: records the intention (and a fresh
    /// `state` when that defence is on) and redirects to the IdP.
    pub fn begin_login(&self, session_id: &str, idp_id: &str) -> HttpResponse {
        let Some(binding) = self.binding(idp_id).cloned() else {
            return page(
                404,
                "<html> <body> <h1>Unknown identity provider.</h1> </body> </html>",
                DocumentKind::ErrorPage,
            );
        };
        let mut st = self.lock();
        let state = self.config.defences.state_check.then(|| st.rng.opaque());
        if let Some(s) = st.sessions.get_mut(session_id) {
            s.pending_idp = Some(binding.idp_id.clone());
            s.pending_state = state.clone();
        }
        drop(st);

        let mut loc = self
            .endpoint(&binding, |e| &e.authorize)
            .append_query("client_id", &binding.client_id)
            .append_query("response_type", binding.response_type())
            .append_query(
                "redirect_uri",
                &binding.redirect_uri(&self.config.origin).to_string(),
            )
            .append_query("scope", &binding.scope);
        if binding.flow == Flow::ClientLibrary {
            loc = loc.append_query("response_mode", "fragment");
        }
        if let Some(s) = state {
            loc = loc.append_query("state", &s);
        }
        HttpResponse::redirect(&loc)
    }

    /// Which IdP a request to a callback path belongs to. `None` on the
    /// shared path means no login was started in this session.
    pub fn resolve_idp(&self, req: &HttpRequest, session_id: &str) -> Option<IdpBinding> {
        let path = req.uri().path();
        let owner = self
            .config
            .bindings
            .iter()
            .find(|b| matches!(&b.resolution, Resolution::PerIdpCallback(p) if p == path));
        if let Some(b) = owner {
            return Some(b.clone());
        }
        let pending = self.lock().sessions.get(session_id)?.pending_idp.clone()?;
        self.binding(&pending)
            .filter(|b| matches!(&b.resolution, Resolution::SharedCallback(p) if p == path))
            .cloned()
    }

    fn check_referer(&self, req: &HttpRequest, expected: BTreeSet<Origin>) -> GuardCheck {
        let defences = self.config.defences;
        let policy = RefererPolicy::from_expected(expected, defences.absent_referer_mode);
        let verdict = evaluate(req.referer(), &policy);
        if !defences.referer_guard {
            return GuardCheck {
                verdict,
                rejection: None,
                flagged: false,
            };
        }
        let rejection = match (
            verdict.disposition(defences.absent_referer_mode),
            verdict.decision,
        ) {
            (Disposition::Reject, Decision::RejectForeign) => Some(CallbackOutcome::CsrfRejected),
            (Disposition::Reject, Decision::IndeterminateMalformed) => {
                Some(CallbackOutcome::MalformedRejected)
            }
            (Disposition::Reject, _) => Some(CallbackOutcome::AbsentRejected),
            _ => None,
        };
        let flagged =
            verdict.disposition(defences.absent_referer_mode) == Disposition::AcceptFlagged;
        GuardCheck {
            verdict,
            rejection,
            flagged,
        }
    }

    fn record(
        &self,
        endpoint: &str,
        session_id: &str,
        p: &Pending,
        outcome: CallbackOutcome,
        subject: Option<String>,
    ) {
        let event = RpEvent {
            endpoint: endpoint.to_string(),
            idp: Some(p.binding.idp_id.clone()),
            verdict: p.verdict.clone(),
            guard_enforced: self.config.defences.referer_guard,
            state_ok: p.state_ok,
            custom_header_ok: p.custom_header_ok,
            outcome,
            flagged: p.flagged,
            session_id: session_id.to_string(),
            subject,
        };
        self.lock().events.push(event);
    }

    fn rejection_page(binding: &IdpBinding, outcome: CallbackOutcome) -> HttpResponse {
        let body = match outcome {
            CallbackOutcome::CsrfRejected => csrf_detected_body(&binding.display_name),
            CallbackOutcome::AbsentRejected | CallbackOutcome::MalformedRejected => {
                ABSENT_REFERER_BODY.to_string()
            }
            CallbackOutcome::NoIntention => NO_INTENTION_BODY.to_string(),
            CallbackOutcome::StateMismatch => STATE_MISMATCH_BODY.to_string(),
            CallbackOutcome::MissingCustomHeader => MISSING_HEADER_BODY.to_string(),
            CallbackOutcome::UpstreamError => UPSTREAM_ERROR_BODY.to_string(),
            _ => BAD_RESPONSE_BODY.to_string(),
        };
        let status = match outcome {
            CallbackOutcome::UpstreamError => 502,
            CallbackOutcome::MissingCredential
            | CallbackOutcome::IdpError
            | CallbackOutcome::WrongEndpoint => 400,
            _ => 403,
        };
        page(status, body, DocumentKind::ErrorPage)
    }

    /// `state` check, consuming the pending value only on success.
    fn check_state(&self, session_id: &str, presented: Option<&str>) -> Option<bool> {
        if !self.config.defences.state_check {
            return None;
        }
        let mut st = self.lock();
        let session = st.sessions.get_mut(session_id)?;
        let ok = evaluate_state(presented, session.pending_state.as_deref());
        if ok {
            session.pending_state = None;
        }
        Some(ok)
    }

    /// Authorization response arriving by redirect.
    pub fn handle_callback(&self, req: &HttpRequest, session_id: &str) -> HttpResponse {
        let endpoint = req.uri().path().to_string();
        let request_origin = req.uri().origin();
        let Some(binding) = self.resolve_idp(req, session_id) else {
            // Shared path with no login in progress. The Referer verdict is
            // still computed (against the RP alone) for the report.
            let check = self.check_referer(req, BTreeSet::from([request_origin]));
            self.lock().events.push(RpEvent {
                endpoint,
                idp: None,
                verdict: check.verdict,
                guard_enforced: self.config.defences.referer_guard,
                state_ok: None,
                custom_header_ok: None,
                outcome: CallbackOutcome::NoIntention,
                flagged: false,
                session_id: session_id.to_string(),
                subject: None,
            });
            return page(403, NO_INTENTION_BODY, DocumentKind::ErrorPage);
        };
        if binding.flow == Flow::ClientLibrary {
            return self.deliver(req, session_id, binding);
        }

        let check = self.check_referer(req, expected_origins(&binding, &request_origin));
        let mut pending = Pending {
            binding,
            verdict: check.verdict,
            state_ok: None,
            custom_header_ok: None,
            flagged: check.flagged,
        };
        if let Some(outcome) = check.rejection {
            self.record(&endpoint, session_id, &pending, outcome, None);
            return Self::rejection_page(&pending.binding, outcome);
        }

        if pending.binding.flow == Flow::Implicit {
            // The token is in the fragment; the state check happens when the
            // extractor delivers it.
            self.record(
                &endpoint,
                session_id,
                &pending,
                CallbackOutcome::ExtractorServed,
                None,
            );
            return self.serve_extractor_page(&pending.binding);
        }

        pending.state_ok = self.check_state(session_id, req.param("state"));
        if pending.state_ok == Some(false) {
            self.record(
                &endpoint,
                session_id,
                &pending,
                CallbackOutcome::StateMismatch,
                None,
            );
            return Self::rejection_page(&pending.binding, CallbackOutcome::StateMismatch);
        }
        self.complete(req, &endpoint, session_id, pending)
    }

    /// Extractor page for an implicit binding: its script posts the
    /// fragment's parameters to the token delivery endpoint.
    pub fn serve_extractor_page(&self, binding: &IdpBinding) -> HttpResponse {
        let target = self
            .config
            .origin
            .at(TOKEN_DELIVERY_PATH)
            .expect("delivery path is valid");
        let script = Action::extractor("extract", target, Method::Post)
            .with_field("idp", &binding.idp_id)
            .with_header("X-Requested-With", "XMLHttpRequest");
        HttpResponse::html(200, EXTRACTOR_BODY)
            .with_page(Page::new(DocumentKind::ExtractorPage).with_action(script))
    }

    /// Page the client library lands on: its script reads the code from the
    /// fragment and sends it to the callback endpoint by XHR.
    fn serve_relay_page(&self, binding: &IdpBinding) -> HttpResponse {
        let target = self
            .config
            .origin
            .at(binding.resolution.path())
            .expect("callback path is valid");
        let script = Action::extractor("extract", target, Method::Get)
            .with_header("X-Requested-With", "XMLHttpRequest");
        HttpResponse::html(
            200,
            format!(
                "<html><body><h1>{} sign-in</h1></body></html>",
                binding.display_name
            ),
        )
        .with_page(Page::new(DocumentKind::ExtractorPage).with_action(script))
    }

    /// Code or token delivered by XHR from one of the RP's own pages.
    pub fn handle_token_delivery(&self, req: &HttpRequest, session_id: &str) -> HttpResponse {
        let named = req.param("idp").and_then(|id| self.binding(id)).cloned();
        let pending_idp = self
            .lock()
            .sessions
            .get(session_id)
            .and_then(|s| s.pending_idp.clone());
        let binding = named.or_else(|| pending_idp.and_then(|id| self.binding(&id).cloned()));
        let Some(binding) = binding else {
            let check = self.check_referer(req, BTreeSet::from([req.uri().origin()]));
            self.lock().events.push(RpEvent {
                endpoint: req.uri().path().to_string(),
                idp: None,
                verdict: check.verdict,
                guard_enforced: self.config.defences.referer_guard,
                state_ok: None,
                custom_header_ok: None,
                outcome: CallbackOutcome::NoIntention,
                flagged: false,
                session_id: session_id.to_string(),
                subject: None,
            });
            return page(403, NO_INTENTION_BODY, DocumentKind::ErrorPage);
        };
        self.deliver(req, session_id, binding)
    }

    fn deliver(&self, req: &HttpRequest, session_id: &str, binding: IdpBinding) -> HttpResponse {
        let endpoint = req.uri().path().to_string();
        // Deliveries are XHRs from the RP's own pages, so only the RP
        // itself is an acceptable Referer here.
        let check = self.check_referer(req, BTreeSet::from([req.uri().origin()]));
        let header_ok = req.headers.get("X-Requested-With") == Some("XMLHttpRequest");
        let mut pending = Pending {
            custom_header_ok: (binding.flow == Flow::ClientLibrary).then_some(header_ok),
            binding,
            verdict: check.verdict,
            state_ok: None,
            flagged: check.flagged,
        };
        if pending.binding.flow == Flow::Code {
            self.record(
                &endpoint,
                session_id,
                &pending,
                CallbackOutcome::WrongEndpoint,
                None,
            );
            return Self::rejection_page(&pending.binding, CallbackOutcome::WrongEndpoint);
        }
        if let Some(outcome) = check.rejection {
            self.record(&endpoint, session_id, &pending, outcome, None);
            return Self::rejection_page(&pending.binding, outcome);
        }
        if self.config.defences.custom_header_check && pending.custom_header_ok == Some(false) {
            self.record(
                &endpoint,
                session_id,
                &pending,
                CallbackOutcome::MissingCustomHeader,
                None,
            );
            return Self::rejection_page(&pending.binding, CallbackOutcome::MissingCustomHeader);
        }
        pending.state_ok = self.check_state(session_id, req.param("state"));
        if pending.state_ok == Some(false) {
            self.record(
                &endpoint,
                session_id,
                &pending,
                CallbackOutcome::StateMismatch,
                None,
            );
            return Self::rejection_page(&pending.binding, CallbackOutcome::StateMismatch);
        }
        self.complete(req, &endpoint, session_id, pending)
    }

    /// Redeems the code (if any), fetches userinfo and binds the session.
    fn complete(
        &self,
        req: &HttpRequest,
        endpoint: &str,
        session_id: &str,
        p: Pending,
    ) -> HttpResponse {
        let binding = &p.binding;
        if req.param("error").is_some() {
            self.record(endpoint, session_id, &p, CallbackOutcome::IdpError, None);
            return Self::rejection_page(binding, CallbackOutcome::IdpError);
        }
        let token = match binding.flow {
            Flow::Implicit => req.param("access_token").map(str::to_string),
            Flow::Code | Flow::ClientLibrary => match req.param("code") {
                None => None,
                Some(code) => match self.exchange_code(binding, code) {
                    Some(t) => Some(t),
                    None => {
                        self.record(
                            endpoint,
                            session_id,
                            &p,
                            CallbackOutcome::UpstreamError,
                            None,
                        );
                        return Self::rejection_page(binding, CallbackOutcome::UpstreamError);
                    }
                },
            },
        };
        let Some(token) = token else {
            self.record(
                endpoint,
                session_id,
                &p,
                CallbackOutcome::MissingCredential,
                None,
            );
            return Self::rejection_page(binding, CallbackOutcome::MissingCredential);
        };
        let Some(identity) = self.fetch_userinfo(binding, &token) else {
            self.record(
                endpoint,
                session_id,
                &p,
                CallbackOutcome::UpstreamError,
                None,
            );
            return Self::rejection_page(binding, CallbackOutcome::UpstreamError);
        };

        let subject = identity.subject.clone();
        {
            let mut st = self.lock();
            if let Some(s) = st.sessions.get_mut(session_id) {
                s.logged_in_subject = Some(identity);
                s.pending_idp = None;
                s.pending_state = None;
            }
        }
        self.record(
            endpoint,
            session_id,
            &p,
            CallbackOutcome::Completed,
            Some(subject.clone()),
        );
        match binding.flow {
            Flow::Code => self.home_page(&format!(
                "Signed in as {subject} via {}",
                binding.display_name
            )),
            Flow::Implicit | Flow::ClientLibrary => {
                HttpResponse::json(200, &json!({ "status": "signed_in", "sub": subject }))
            }
        }
    }

    fn exchange_code(&self, binding: &IdpBinding, code: &str) -> Option<String> {
        let mut fields = vec![
            ("grant_type".to_string(), "authorization_code".to_string()),
            ("client_id".to_string(), binding.client_id.clone()),
            ("code".to_string(), code.to_string()),
            (
                "redirect_uri".to_string(),
                binding.redirect_uri(&self.config.origin).to_string(),
            ),
        ];
        if let Some(secret) = &binding.client_secret {
            fields.push(("client_secret".to_string(), secret.clone()));
        }
        let req = HttpRequest::post_form(&self.endpoint(binding, |e| &e.token), fields);
        let resp = self.backchannel.route(&req).ok()?;
        if resp.status != 200 {
            return None;
        }
        resp.json_body()?
            .get("access_token")?
            .as_str()
            .map(str::to_string)
    }

    fn fetch_userinfo(&self, binding: &IdpBinding, token: &str) -> Option<BoundIdentity> {
        let req = HttpRequest::get(&self.endpoint(binding, |e| &e.userinfo))
            .with_header("Authorization", format!("Bearer {token}"));
        let resp = self.backchannel.route(&req).ok()?;
        if resp.status != 200 {
            return None;
        }
        let body = resp.json_body()?;
        let obj = body.as_object()?;
        let subject = obj.get("sub")?.as_str()?.to_string();
        let attributes = obj
            .iter()
            .filter(|(k, _)| k.as_str() != "sub")
            .filter_map(|(k, v)| Some((k.clone(), v.as_str()?.to_string())))
            .collect();
        Some(BoundIdentity {
            idp_id: binding.idp_id.clone(),
            subject,
            attributes,
        })
    }
}

impl Server for RelyingParty {
    fn handle(&self, req: &HttpRequest) -> HttpResponse {
        let (sid, fresh) = self.session_for(req);
        let path = req.uri().path();
        let is_callback = self
            .config
            .bindings
            .iter()
            .any(|b| b.resolution.path() == path);
        let relay = self
            .config
            .bindings
            .iter()
            .find(|b| b.flow == Flow::ClientLibrary && b.relay_path() == path);

        let resp = if is_callback {
            self.handle_callback(req, &sid)
        } else if path == TOKEN_DELIVERY_PATH {
            self.handle_token_delivery(req, &sid)
        } else if let Some(b) = relay {
            self.serve_relay_page(b)
        } else if path == LOGIN_PATH {
            match req.param("idp") {
                Some(id) => self.begin_login(&sid, id),
                None => page(400, BAD_RESPONSE_BODY, DocumentKind::ErrorPage),
            }
        } else if path == "/" {
            let bound = self
                .session(&sid)
                .and_then(|s| s.logged_in_subject)
                .map(|b| b.subject);
            match bound {
                Some(sub) => self.home_page(&format!("Signed in as {sub}")),
                None => self.home_page("Welcome"),
            }
        } else {
            page(
                404,
                "<html> <body> <h1>Not found.</h1> </body> </html>",
                DocumentKind::ErrorPage,
            )
        };
        if fresh {
            resp.with_set_cookie(SESSION_COOKIE, &sid)
        } else {
            resp
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::parse_uri;
    use crate::net::Network;

    fn uri(s: &str) -> Uri {
        parse_uri(s).unwrap()
    }

    fn o(s: &str) -> Origin {
        s.parse().unwrap()
    }

    fn binding(id: &str, display: &str, res: Resolution, flow: Flow) -> IdpBinding {
        IdpBinding {
            idp_id: id.into(),
            display_name: display.into(),
            idp_origin: o(&format!("https://{id}.com")),
            resolution: res,
            client_id: format!("rp-at-{id}"),
            client_secret: Some("s".into()),
            flow,
            scope: "openid".into(),
        }
    }

    /// IdP stub: any code redeems to token "tok-<code>", whose subject is
    /// the code itself.
    fn backchannel() -> Arc<Network> {
        let net = Network::new();
        for host in ["https://aidp.com", "https://bidp.com"] {
            net.attach(
                o(host),
                Arc::new(|req: &HttpRequest| match req.uri().path() {
                    "/token" => match req.param("code") {
                        Some("bad") | None => {
                            HttpResponse::json(400, &json!({"error": "invalid_grant"}))
                        }
                        Some(c) => {
                            HttpResponse::json(200, &json!({"access_token": format!("tok-{c}")}))
                        }
                    },
                    "/userinfo" => {
                        let tok = req
                            .headers
                            .get("Authorization")
                            .unwrap_or("")
                            .trim_start_matches("Bearer ");
                        match tok
                            .strip_prefix("tok-")
                            .or_else(|| tok.strip_prefix("imp-"))
                        {
                            Some(sub) => HttpResponse::json(200, &json!({"sub": sub, "name": sub})),
                            None => HttpResponse::json(401, &json!({"error": "invalid_token"})),
                        }
                    }
                    _ => HttpResponse::html(404, ""),
                }),
            );
        }
        Arc::new(net)
    }

    fn rp(bindings: Vec<IdpBinding>, defences: DefenceConfig) -> RelyingParty {
        RelyingParty::new(
            RpConfig {
                origin: o("https://rp.com"),
                bindings,
                defences,
                idp_endpoints: BTreeMap::new(),
            },
            backchannel(),
            7,
        )
        .unwrap()
    }

    fn standard(defences: DefenceConfig) -> RelyingParty {
        rp(
            vec![
                binding(
                    "aidp",
                    "AIdP",
                    Resolution::PerIdpCallback("/AIdP-callback".into()),
                    Flow::Code,
                ),
                binding(
                    "bidp",
                    "BIdP",
                    Resolution::PerIdpCallback("/BIdP-callback".into()),
                    Flow::Code,
                ),
            ],
            defences,
        )
    }

    fn shared(defences: DefenceConfig) -> RelyingParty {
        rp(
            vec![
                binding(
                    "aidp",
                    "AIdP",
                    Resolution::SharedCallback("/oauth2-callback".into()),
                    Flow::Code,
                ),
                binding(
                    "bidp",
                    "BIdP",
                    Resolution::SharedCallback("/oauth2-callback".into()),
                    Flow::Code,
                ),
            ],
            defences,
        )
    }

    fn new_session(rp: &RelyingParty) -> String {
        let resp = rp.handle(&HttpRequest::get(&uri("https://rp.com/")));
        resp.set_cookies()[0].1.clone()
    }

    fn req(url: &str, sid: &str, referer: Option<&str>) -> HttpRequest {
        let mut r =
            HttpRequest::get(&uri(url)).with_header("Cookie", format!("{SESSION_COOKIE}={sid}"));
        if let Some(f) = referer {
            r = r.with_header("Referer", f);
        }
        r
    }

    fn bound(rp: &RelyingParty, sid: &str) -> Option<String> {
        rp.session(sid)?.logged_in_subject.map(|b| b.subject)
    }

    #[test]
    fn binding_paths_are_validated() {
        let dup = RelyingParty::new(
            RpConfig {
                origin: o("https://rp.com"),
                bindings: vec![
                    binding(
                        "aidp",
                        "AIdP",
                        Resolution::PerIdpCallback("/cb".into()),
                        Flow::Code,
                    ),
                    binding(
                        "bidp",
                        "BIdP",
                        Resolution::PerIdpCallback("/cb".into()),
                        Flow::Code,
                    ),
                ],
                defences: DefenceConfig::default(),
                idp_endpoints: BTreeMap::new(),
            },
            backchannel(),
            0,
        );
        assert_eq!(dup.unwrap_err(), RpError::DuplicatePath("/cb".into()));

        let two_shared = RelyingParty::new(
            RpConfig {
                origin: o("https://rp.com"),
                bindings: vec![
                    binding(
                        "aidp",
                        "AIdP",
                        Resolution::SharedCallback("/a".into()),
                        Flow::Code,
                    ),
                    binding(
                        "bidp",
                        "BIdP",
                        Resolution::SharedCallback("/b".into()),
                        Flow::Code,
                    ),
                ],
                defences: DefenceConfig::default(),
                idp_endpoints: BTreeMap::new(),
            },
            backchannel(),
            0,
        );
        assert_eq!(two_shared.unwrap_err(), RpError::MultipleSharedPaths);
    }

    #[test]
    fn begin_login_with_and_without_state() {
        let with = standard(DefenceConfig {
            state_check: true,
            ..DefenceConfig::default()
        });
        let sid = new_session(&with);
        let loc = with.begin_login(&sid, "aidp").location().unwrap().unwrap();
        assert_eq!(loc.origin(), o("https://aidp.com"));
        assert_eq!(loc.path(), "/authorize");
        assert_eq!(loc.query_param("response_type"), Some("code"));
        assert_eq!(
            loc.query_param("redirect_uri"),
            Some("https://rp.com/AIdP-callback")
        );
        let state = loc.query_param("state").unwrap();
        assert_eq!(state.len(), 32);
        let s = with.session(&sid).unwrap();
        assert_eq!(s.pending_idp.as_deref(), Some("aidp"));
        assert_eq!(s.pending_state.as_deref(), Some(state));

        let without = standard(DefenceConfig::default());
        let sid = new_session(&without);
        let loc = without
            .begin_login(&sid, "aidp")
            .location()
            .unwrap()
            .unwrap();
        assert_eq!(loc.query_param("state"), None);

        assert_eq!(without.begin_login(&sid, "nobody").status, 404);
    }

    #[test]
    fn resolve_idp_strategies() {
        let per = standard(DefenceConfig::default());
        let sid = new_session(&per);
        let r = req("https://rp.com/AIdP-callback?code=x", &sid, None);
        assert_eq!(per.resolve_idp(&r, &sid).unwrap().idp_id, "aidp");

        let sh = shared(DefenceConfig::default());
        let sid = new_session(&sh);
        let r = req("https://rp.com/oauth2-callback?code=x", &sid, None);
        assert!(sh.resolve_idp(&r, &sid).is_none());
        sh.begin_login(&sid, "bidp");
        assert_eq!(sh.resolve_idp(&r, &sid).unwrap().idp_id, "bidp");
    }

    #[test]
    fn guarded_callback_accepts_idp_and_rp_referers() {
        for referer in ["https://aidp.com/", "https://rp.com/"] {
            let rp = standard(DefenceConfig::default());
            let sid = new_session(&rp);
            let resp = rp.handle(&req(
                "https://rp.com/AIdP-callback?code=alice",
                &sid,
                Some(referer),
            ));
            assert_eq!(resp.status, 200);
            assert_eq!(bound(&rp, &sid).as_deref(), Some("alice"));
        }
    }

    #[test]
    fn guarded_callback_rejects_attacker_referer() {
        let rp = standard(DefenceConfig::default());
        let sid = new_session(&rp);
        let resp = rp.handle(&req(
            "https://rp.com/AIdP-callback?code=mallory",
            &sid,
            Some("https://attacker.com/"),
        ));
        assert_eq!(resp.status, 403);
        assert_eq!(resp.body, csrf_detected_body("AIdP"));
        assert_eq!(bound(&rp, &sid), None);
        let ev = rp.events().pop().unwrap();
        assert_eq!(ev.outcome, CallbackOutcome::CsrfRejected);
        assert_eq!(ev.verdict.decision, Decision::RejectForeign);
    }

    #[test]
    fn bidp_referer_is_foreign_for_aidp_callback() {
        let rp = standard(DefenceConfig::default());
        let sid = new_session(&rp);
        let resp = rp.handle(&req(
            "https://rp.com/AIdP-callback?code=m",
            &sid,
            Some("https://bidp.com/"),
        ));
        assert_eq!(resp.status, 403);
    }

    #[test]
    fn unguarded_callback_binds_whatever_code_arrives() {
        let rp = standard(DefenceConfig::none());
        let sid = new_session(&rp);
        rp.handle(&req(
            "https://rp.com/AIdP-callback?code=mallory",
            &sid,
            Some("https://attacker.com/"),
        ));
        assert_eq!(bound(&rp, &sid).as_deref(), Some("mallory"));
        // The verdict is still computed and reported.
        let ev = rp.events().pop().unwrap();
        assert!(!ev.guard_enforced);
        assert_eq!(ev.verdict.decision, Decision::RejectForeign);
    }

    #[test]
    fn state_is_single_use() {
        let rp = standard(DefenceConfig {
            referer_guard: false,
            state_check: true,
            ..DefenceConfig::default()
        });
        let sid = new_session(&rp);
        let loc = rp.begin_login(&sid, "aidp").location().unwrap().unwrap();
        let state = loc.query_param("state").unwrap().to_string();
        let cb = format!("https://rp.com/AIdP-callback?code=alice&state={state}");
        assert_eq!(rp.handle(&req(&cb, &sid, None)).status, 200);
        let again = rp.handle(&req(&cb, &sid, None));
        assert_eq!(again.status, 403);
        assert_eq!(again.body, STATE_MISMATCH_BODY);

        let missing = rp.handle(&req("https://rp.com/AIdP-callback?code=m", &sid, None));
        assert_eq!(missing.status, 403);
    }

    #[test]
    fn cold_shared_callback_is_no_intention() {
        let rp = shared(DefenceConfig::none());
        let sid = new_session(&rp);
        let resp = rp.handle(&req(
            "https://rp.com/oauth2-callback?code=mallory",
            &sid,
            Some("https://attacker.com/"),
        ));
        assert_eq!(resp.status, 403);
        assert_eq!(bound(&rp, &sid), None);
        let ev = rp.events().pop().unwrap();
        assert_eq!(ev.outcome, CallbackOutcome::NoIntention);
        assert_eq!(ev.verdict.decision, Decision::RejectForeign);
    }

    #[test]
    fn absent_referer_modes() {
        let run = |mode| {
            let rp = standard(DefenceConfig {
                absent_referer_mode: mode,
                ..DefenceConfig::default()
            });
            let sid = new_session(&rp);
            let resp = rp.handle(&req("https://rp.com/AIdP-callback?code=alice", &sid, None));
            (resp.status, rp.events().pop().unwrap())
        };
        let (status, ev) = run(AbsentMode::FailClosed);
        assert_eq!((status, ev.outcome), (403, CallbackOutcome::AbsentRejected));
        let (status, ev) = run(AbsentMode::FailOpen);
        assert_eq!(
            (status, ev.outcome, ev.flagged),
            (200, CallbackOutcome::Completed, false)
        );
        let (status, ev) = run(AbsentMode::FlagOnly);
        assert_eq!(
            (status, ev.outcome, ev.flagged),
            (200, CallbackOutcome::Completed, true)
        );
        assert_eq!(ev.verdict.decision, Decision::IndeterminateAbsent);
    }

    #[test]
    fn malformed_referer_is_distinct() {
        let rp = standard(DefenceConfig::default());
        let sid = new_session(&rp);
        rp.handle(&req(
            "https://rp.com/AIdP-callback?code=a",
            &sid,
            Some("not a url"),
        ));
        let ev = rp.events().pop().unwrap();
        assert_eq!(ev.outcome, CallbackOutcome::MalformedRejected);
        assert_eq!(ev.verdict.decision, Decision::IndeterminateMalformed);
    }

    #[test]
    fn upstream_failure_leaves_session_unbound() {
        let rp = standard(DefenceConfig::default());
        let sid = new_session(&rp);
        let resp = rp.handle(&req(
            "https://rp.com/AIdP-callback?code=bad",
            &sid,
            Some("https://aidp.com/"),
        ));
        assert_eq!(resp.status, 502);
        assert_eq!(bound(&rp, &sid), None);
    }

    #[test]
    fn implicit_callback_serves_extractor_or_detection_page() {
        let rp = rp(
            vec![binding(
                "aidp",
                "AIdP",
                Resolution::PerIdpCallback("/AIdP-callback".into()),
                Flow::Implicit,
            )],
            DefenceConfig::default(),
        );
        let sid = new_session(&rp);
        let ok = rp.handle(&req(
            "https://rp.com/AIdP-callback",
            &sid,
            Some("https://aidp.com"),
        ));
        assert_eq!(ok.body, EXTRACTOR_BODY);
        assert_eq!(ok.page.unwrap().kind, DocumentKind::ExtractorPage);
        let evil = rp.handle(&req(
            "https://rp.com/AIdP-callback",
            &sid,
            Some("https://attacker.com"),
        ));
        assert_eq!(
            evil.body,
            "<html> <body> <h1>A CSRF attack is detected on the AIdP signin endpoint!</h1> </body> </html>"
        );

        let delivery = HttpRequest::post_form(
            &uri("https://rp.com/token-delivery"),
            vec![
                ("idp".into(), "aidp".into()),
                ("access_token".into(), "imp-alice".into()),
            ],
        )
        .with_header("Referer", "https://rp.com/AIdP-callback")
        .with_header("Cookie", format!("{SESSION_COOKIE}={sid}"));
        assert_eq!(rp.handle(&delivery).status, 200);
        assert_eq!(bound(&rp, &sid).as_deref(), Some("alice"));
    }

    #[test]
    fn client_library_delivery_checks() {
        let make = || {
            rp(
                vec![binding(
                    "aidp",
                    "AIdP",
                    Resolution::PerIdpCallback("/AIdP-callback".into()),
                    Flow::ClientLibrary,
                )],
                DefenceConfig {
                    custom_header_check: true,
                    ..DefenceConfig::default()
                },
            )
        };
        let xhr = |rp: &RelyingParty, sid: &str, referer: &str, header: bool| {
            let mut r = req(
                "https://rp.com/AIdP-callback?code=alice",
                sid,
                Some(referer),
            );
            if header {
                r = r.with_header("X-Requested-With", "XMLHttpRequest");
            }
            rp.handle(&r)
        };

        let rp1 = make();
        let sid = new_session(&rp1);
        let loc = rp1.begin_login(&sid, "aidp").location().unwrap().unwrap();
        assert_eq!(loc.query_param("response_mode"), Some("fragment"));
        assert_eq!(
            loc.query_param("redirect_uri"),
            Some("https://rp.com/AIdP-relay")
        );
        assert_eq!(xhr(&rp1, &sid, "https://rp.com", true).status, 200);
        assert_eq!(bound(&rp1, &sid).as_deref(), Some("alice"));

        // The IdP is not an acceptable Referer for a client-library delivery.
        let rp2 = make();
        let sid = new_session(&rp2);
        assert_eq!(xhr(&rp2, &sid, "https://aidp.com/", true).status, 403);

        let rp3 = make();
        let sid = new_session(&rp3);
        let resp = xhr(&rp3, &sid, "https://rp.com/", false);
        assert_eq!(resp.status, 403);
        assert_eq!(
            rp3.events().pop().unwrap().outcome,
            CallbackOutcome::MissingCustomHeader
        );
    }
}
