//! Mock identity provider: authorization, login, token and userinfo
//! endpoints for the authorization code and implicit grants.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;
use subtle::ConstantTimeEq;

use crate::browser::{Action, DocumentKind, Page};
use crate::http::{HttpRequest, HttpResponse, Method, Origin, Scheme, Uri};
use crate::net::Server;
use crate::rng::OpaqueGen;

pub const SESSION_COOKIE: &str = "idp_session";
pub const DEFAULT_CODE_TTL: u64 = 600;
pub const DEFAULT_TOKEN_TTL: u64 = 3600;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Endpoints {
    pub authorize: String,
    pub login: String,
    pub token: String,
    pub userinfo: String,
}

impl Default for Endpoints {
    fn default() -> Self {
        Endpoints {
            authorize: "/authorize".into(),
            login: "/login".into(),
            token: "/token".into(),
            userinfo: "/userinfo".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAccount {
    pub password: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

/// An RP's standing record at the IdP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientRegistration {
    pub client_id: String,
    #[serde(default)]
    pub client_secret: Option<String>,
    pub redirect_uri: Uri,
    /// JavaScript origin allowed to receive responses through the IdP's
    /// client library.
    #[serde(default)]
    pub origin: Option<Origin>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdpConfig {
    pub id: String,
    pub issuer_origin: Origin,
    #[serde(default)]
    pub auto_grant: bool,
    #[serde(default)]
    pub require_https_redirect_uri: bool,
    #[serde(default = "default_code_ttl")]
    pub code_ttl: u64,
    #[serde(default = "default_token_ttl")]
    pub token_ttl: u64,
    #[serde(default)]
    pub endpoints: Endpoints,
    #[serde(default)]
    pub registered_clients: Vec<ClientRegistration>,
    #[serde(default)]
    pub users: BTreeMap<String, UserAccount>,
}

fn default_code_ttl() -> u64 {
    DEFAULT_CODE_TTL
}

fn default_token_ttl() -> u64 {
    DEFAULT_TOKEN_TTL
}

impl IdpConfig {
    pub fn new(id: &str, issuer_origin: Origin) -> Self {
        IdpConfig {
            id: id.to_string(),
            issuer_origin,
            auto_grant: false,
            require_https_redirect_uri: false,
            code_ttl: DEFAULT_CODE_TTL,
            token_ttl: DEFAULT_TOKEN_TTL,
            endpoints: Endpoints::default(),
            registered_clients: Vec::new(),
            users: BTreeMap::new(),
        }
    }

    pub fn with_user(
        mut self,
        username: &str,
        password: &str,
        attributes: &[(&str, &str)],
    ) -> Self {
        self.users.insert(
            username.to_string(),
            UserAccount {
                password: password.to_string(),
                attributes: attributes
                    .iter()
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect(),
            },
        );
        self
    }

    pub fn endpoint(&self, path: &str) -> Uri {
        self.issuer_origin
            .at(path)
            .expect("endpoint paths are validated when the provider is built")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrantKind {
    Code,
    AccessToken,
}

/// An issued code or implicit-flow access token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorizationGrant {
    pub value: String,
    pub grant_kind: GrantKind,
    pub client_id: String,
    pub redirect_uri: Uri,
    pub subject: String,
    pub issued_at: u64,
    pub consumed: bool,
    pub scope: String,
}

/// A bearer token the userinfo endpoint will honour, and the grant it came
/// from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuedToken {
    pub value: String,
    pub subject: String,
    pub client_id: String,
    pub grant: String,
    pub issued_at: u64,
}

/// Audit log entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum IdpEvent {
    ConsentSubmitted {
        session: String,
        client_id: String,
    },
    GrantIssued {
        value: String,
        kind: GrantKind,
        client_id: String,
        subject: String,
        session: String,
        via_consent: bool,
    },
    CodeRedeemed {
        code: String,
        client_id: String,
        access_token: String,
    },
    TokenRequestRejected {
        code: Option<String>,
        error: String,
    },
    UserinfoServed {
        access_token: String,
        subject: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdpError {
    #[error("client_id {0:?} is already registered")]
    DuplicateClient(String),
    #[error("redirect_uri {0} must use https at this IdP")]
    InsecureRedirectUri(Uri),
    #[error("redirect_uri {0} must not carry a fragment")]
    RedirectUriFragment(Uri),
    #[error("issuer {0} must be served over https")]
    InsecureIssuer(Origin),
    #[error("endpoint path {0:?} is not a valid absolute path")]
    BadEndpoint(String),
}

#[derive(Debug, Clone)]
struct IdpSession {
    subject: String,
    consent_nonce: String,
}

struct IdpState {
    clients: BTreeMap<String, ClientRegistration>,
    sessions: BTreeMap<String, IdpSession>,
    grants: BTreeMap<String, AuthorizationGrant>,
    tokens: BTreeMap<String, IssuedToken>,
    events: Vec<IdpEvent>,
    clock: u64,
    rng: OpaqueGen,
}

pub struct IdentityProvider {
    config: IdpConfig,
    state: Mutex<IdpState>,
}

impl std::fmt::Debug for IdentityProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IdentityProvider")
            .field("id", &self.config.id)
            .field("issuer", &self.config.issuer_origin)
            .finish()
    }
}

type Params = Vec<(String, String)>;

fn lookup<'a>(params: &'a Params, name: &str) -> Option<&'a str> {
    params
        .iter()
        .find(|(k, _)| k == name)
        .map(|(_, v)| v.as_str())
}

fn request_params(req: &HttpRequest) -> Params {
    match req.method {
        Method::Get => req.uri().query().to_vec(),
        Method::Post => req.body.clone().unwrap_or_default(),
    }
}

fn error_page(status: u16, message: &str) -> HttpResponse {
    HttpResponse::html(
        status,
        format!("<html> <body> <h1>{message}</h1> </body> </html>"),
    )
    .with_page(Page::new(DocumentKind::ErrorPage))
}

fn oauth_error(status: u16, error: &str) -> HttpResponse {
    HttpResponse::json(status, &json!({ "error": error }))
}

impl IdentityProvider {
    /// Builds the provider and registers every client listed in `config`.
    pub fn new(config: IdpConfig, seed: u64) -> Result<Self, IdpError> {
        if config.issuer_origin.scheme != Scheme::Https {
            return Err(IdpError::InsecureIssuer(config.issuer_origin.clone()));
        }
        let ep = &config.endpoints;
        for path in [&ep.authorize, &ep.login, &ep.token, &ep.userinfo] {
            if config.issuer_origin.at(path).is_err() {
                return Err(IdpError::BadEndpoint(path.clone()));
            }
        }
        let clients = config.registered_clients.clone();
        let idp = IdentityProvider {
            state: Mutex::new(IdpState {
                clients: BTreeMap::new(),
                sessions: BTreeMap::new(),
                grants: BTreeMap::new(),
                tokens: BTreeMap::new(),
                events: Vec::new(),
                clock: 0,
                rng: OpaqueGen::for_actor(seed, &format!("idp:{}", config.id)),
            }),
            config,
        };
        for reg in clients {
            idp.register_client(reg)?;
        }
        Ok(idp)
    }

    pub fn config(&self) -> &IdpConfig {
        &self.config
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn origin(&self) -> &Origin {
        &self.config.issuer_origin
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, IdpState> {
        self.state.lock().expect("idp state poisoned")
    }

    pub fn register_client(&self, reg: ClientRegistration) -> Result<String, IdpError> {
        if reg.redirect_uri.fragment().is_some() {
            return Err(IdpError::RedirectUriFragment(reg.redirect_uri));
        }
        if self.config.require_https_redirect_uri && reg.redirect_uri.scheme() != Scheme::Https {
            return Err(IdpError::InsecureRedirectUri(reg.redirect_uri));
        }
        let mut st = self.lock();
        if st.clients.contains_key(&reg.client_id) {
            return Err(IdpError::DuplicateClient(reg.client_id));
        }
        let id = reg.client_id.clone();
        st.clients.insert(id.clone(), reg);
        Ok(id)
    }

    pub fn client(&self, client_id: &str) -> Option<ClientRegistration> {
        self.lock().clients.get(client_id).cloned()
    }

    pub fn grants(&self) -> Vec<AuthorizationGrant> {
        self.lock().grants.values().cloned().collect()
    }

    pub fn tokens(&self) -> Vec<IssuedToken> {
        self.lock().tokens.values().cloned().collect()
    }

    pub fn events(&self) -> Vec<IdpEvent> {
        self.lock().events.clone()
    }

    /// Advances the logical clock, e.g. to expire outstanding codes.
    pub fn advance_clock(&self, ticks: u64) {
        self.lock().clock += ticks;
    }

    fn session_of(&self, st: &IdpState, req: &HttpRequest) -> Option<(String, IdpSession)> {
        let sid = req.cookie(SESSION_COOKIE)?;
        st.sessions.get(sid).map(|s| (sid.to_string(), s.clone()))
    }

    fn login_form(&self, resume: Option<&Params>) -> HttpResponse {
        let mut fields = vec![
            ("username".to_string(), String::new()),
            ("password".to_string(), String::new()),
        ];
        if let Some(params) = resume {
            let mut ser = form_urlencoded::Serializer::new(String::new());
            for (k, v) in params {
                ser.append_pair(k, v);
            }
            fields.push(("continue".to_string(), ser.finish()));
        }
        let action = Action::form(
            "login",
            self.config.endpoint(&self.config.endpoints.login),
            fields,
        );
        HttpResponse::html(
            200,
            format!(
                "<html><body><h1>Sign in to {}</h1><form method=\"post\" action=\"{}\"></form></body></html>",
                self.config.id, action.target
            ),
        )
        .with_page(Page::new(DocumentKind::IdpLoginForm).with_action(action))
    }

    /// Authorization endpoint.
    pub fn handle_authorize(&self, req: &HttpRequest) -> HttpResponse {
        let mut st = self.lock();
        st.clock += 1;
        let params = request_params(req);

        let Some(client) = lookup(&params, "client_id")
            .and_then(|id| st.clients.get(id))
            .cloned()
        else {
            return error_page(400, "Unknown client_id");
        };
        // A redirect_uri that does not match the registration ends the flow
        // here; redirecting anywhere would make the IdP an open redirector.
        let redirect_uri = match lookup(&params, "redirect_uri").map(str::parse::<Uri>) {
            Some(Ok(u)) if u == client.redirect_uri => u,
            _ => return error_page(400, "redirect_uri does not match the registered value"),
        };
        let state_param = lookup(&params, "state").map(str::to_string);
        let error_redirect = |error: &str| {
            let mut loc = redirect_uri.clone().append_query("error", error);
            if let Some(s) = &state_param {
                loc = loc.append_query("state", s);
            }
            HttpResponse::redirect(&loc)
        };

        let response_type = lookup(&params, "response_type").unwrap_or("");
        let kind = match response_type {
            "code" => GrantKind::Code,
            "token" => GrantKind::AccessToken,
            _ => return error_redirect("unsupported_response_type"),
        };
        // Codes go in the fragment only for clients registered for the
        // JavaScript client library, which reads them from the page.
        let in_fragment = match (kind, lookup(&params, "response_mode")) {
            (GrantKind::AccessToken, None | Some("fragment")) => true,
            (GrantKind::Code, None | Some("query")) => false,
            (GrantKind::Code, Some("fragment")) if client.origin.is_some() => true,
            (GrantKind::Code, Some("fragment")) => return error_redirect("unauthorized_client"),
            _ => return error_redirect("invalid_request"),
        };

        let authorize_params: Params = params
            .iter()
            .filter(|(k, _)| k != "consent" && k != "consent_nonce")
            .cloned()
            .collect();

        let Some((sid, session)) = self.session_of(&st, req) else {
            drop(st);
            return self.login_form(Some(&authorize_params));
        };

        let consented = req.method == Method::Post && lookup(&params, "consent") == Some("granted");
        if consented {
            let nonce_ok = lookup(&params, "consent_nonce")
                .map(|n| bool::from(n.as_bytes().ct_eq(session.consent_nonce.as_bytes())))
                .unwrap_or(false);
            if !nonce_ok {
                return error_page(400, "Consent form expired");
            }
            st.events.push(IdpEvent::ConsentSubmitted {
                session: sid.clone(),
                client_id: client.client_id.clone(),
            });
        } else if !self.config.auto_grant {
            let mut fields = authorize_params.clone();
            fields.push(("consent".into(), "granted".into()));
            fields.push(("consent_nonce".into(), session.consent_nonce.clone()));
            let target = self.config.endpoint(&self.config.endpoints.authorize);
            let body = format!(
                "<html><body><h1>{} wants to access your {} account</h1><form method=\"post\" action=\"{}\"><button>Allow</button></form></body></html>",
                client.client_id, self.config.id, target
            );
            return HttpResponse::html(200, body).with_page(
                Page::new(DocumentKind::IdpConsentPage)
                    .with_action(Action::form("grant", target, fields)),
            );
        }

        let value = st.rng.opaque();
        let scope = lookup(&params, "scope").unwrap_or("").to_string();
        let issued_at = st.clock;
        st.grants.insert(
            value.clone(),
            AuthorizationGrant {
                value: value.clone(),
                grant_kind: kind,
                client_id: client.client_id.clone(),
                redirect_uri: redirect_uri.clone(),
                subject: session.subject.clone(),
                issued_at,
                consumed: false,
                scope,
            },
        );
        if kind == GrantKind::AccessToken {
            st.tokens.insert(
                value.clone(),
                IssuedToken {
                    value: value.clone(),
                    subject: session.subject.clone(),
                    client_id: client.client_id.clone(),
                    grant: value.clone(),
                    issued_at,
                },
            );
        }
        st.events.push(IdpEvent::GrantIssued {
            value: value.clone(),
            kind,
            client_id: client.client_id.clone(),
            subject: session.subject.clone(),
            session: sid,
            via_consent: consented,
        });

        let mut response: Params = match kind {
            GrantKind::Code => vec![("code".into(), value)],
            GrantKind::AccessToken => vec![
                ("access_token".into(), value),
                ("token_type".into(), "bearer".into()),
                ("expires_in".into(), self.config.token_ttl.to_string()),
            ],
        };
        if let Some(s) = state_param {
            response.push(("state".into(), s));
        }
        let location = if in_fragment {
            redirect_uri.with_fragment_params(response)
        } else {
            response
                .into_iter()
                .fold(redirect_uri, |u, (k, v)| u.append_query(&k, &v))
        };
        HttpResponse::redirect(&location)
    }

    /// Login endpoint. `GET` shows the form; `POST` checks credentials and
    /// resumes the pending authorization request, if any.
    pub fn handle_login(&self, req: &HttpRequest) -> HttpResponse {
        if req.method == Method::Get {
            return self.login_form(None);
        }
        let params = request_params(req);
        let resume: Option<Params> = lookup(&params, "continue")
            .filter(|c| !c.is_empty())
            .map(|c| form_urlencoded::parse(c.as_bytes()).into_owned().collect());
        let username = lookup(&params, "username").unwrap_or("");
        let password = lookup(&params, "password").unwrap_or("");

        let Some(account) = self.config.users.get(username) else {
            return error_page(401, "Authentication failed");
        };
        if !bool::from(account.password.as_bytes().ct_eq(password.as_bytes())) {
            return self.login_form(resume.as_ref());
        }

        let mut st = self.lock();
        st.clock += 1;
        let sid = st.rng.opaque();
        let consent_nonce = st.rng.opaque();
        st.sessions.insert(
            sid.clone(),
            IdpSession {
                subject: username.to_string(),
                consent_nonce,
            },
        );
        drop(st);

        let resp = match resume {
            Some(params) => HttpResponse::redirect(
                &self
                    .config
                    .endpoint(&self.config.endpoints.authorize)
                    .with_query(params),
            ),
            None => HttpResponse::html(
                200,
                format!(
                    "<html><body><h1>Signed in to {} as {username}</h1></body></html>",
                    self.config.id
                ),
            )
            .with_page(Page::new(DocumentKind::Plain)),
        };
        resp.with_set_cookie(SESSION_COOKIE, &sid)
    }

    /// Token endpoint: redeems an authorization code, once.
    pub fn handle_token(&self, req: &HttpRequest) -> HttpResponse {
        let mut st = self.lock();
        st.clock += 1;
        let params = request_params(req);
        let code = lookup(&params, "code").map(str::to_string);
        let reject = |st: &mut IdpState, status: u16, error: &str| {
            st.events.push(IdpEvent::TokenRequestRejected {
                code: code.clone(),
                error: error.to_string(),
            });
            oauth_error(status, error)
        };

        if req.method != Method::Post {
            return reject(&mut st, 400, "invalid_request");
        }
        if lookup(&params, "grant_type") != Some("authorization_code") {
            return reject(&mut st, 400, "unsupported_grant_type");
        }
        let Some(client) = lookup(&params, "client_id")
            .and_then(|id| st.clients.get(id))
            .cloned()
        else {
            return reject(&mut st, 401, "invalid_client");
        };
        if let Some(secret) = &client.client_secret {
            let presented = lookup(&params, "client_secret").unwrap_or("");
            if !bool::from(presented.as_bytes().ct_eq(secret.as_bytes())) {
                return reject(&mut st, 401, "invalid_client");
            }
        }
        let Some(grant) = code.as_ref().and_then(|c| st.grants.get(c)).cloned() else {
            return reject(&mut st, 400, "invalid_grant");
        };
        let presented_redirect =
            lookup(&params, "redirect_uri").and_then(|u| u.parse::<Uri>().ok());
        let valid = grant.grant_kind == GrantKind::Code
            && !grant.consumed
            && st.clock.saturating_sub(grant.issued_at) <= self.config.code_ttl
            && grant.client_id == client.client_id
            && presented_redirect.as_ref() == Some(&grant.redirect_uri);
        if !valid {
            return reject(&mut st, 400, "invalid_grant");
        }

        if let Some(g) = st.grants.get_mut(&grant.value) {
            g.consumed = true;
        }
        let token = st.rng.opaque();
        let issued_at = st.clock;
        st.tokens.insert(
            token.clone(),
            IssuedToken {
                value: token.clone(),
                subject: grant.subject.clone(),
                client_id: client.client_id.clone(),
                grant: grant.value.clone(),
                issued_at,
            },
        );
        st.events.push(IdpEvent::CodeRedeemed {
            code: grant.value,
            client_id: client.client_id,
            access_token: token.clone(),
        });
        HttpResponse::json(
            200,
            &json!({
                "access_token": token,
                "token_type": "bearer",
                "expires_in": self.config.token_ttl,
            }),
        )
    }

    /// Userinfo endpoint: the subject and attributes behind a bearer token.
    pub fn handle_userinfo(&self, req: &HttpRequest) -> HttpResponse {
        let mut st = self.lock();
        st.clock += 1;
        let bearer = req
            .headers
            .get("Authorization")
            .and_then(|h| h.strip_prefix("Bearer "))
            .or_else(|| req.param("access_token"));
        let Some(token) = bearer.and_then(|t| st.tokens.get(t)).cloned() else {
            return oauth_error(401, "invalid_token");
        };
        if st.clock.saturating_sub(token.issued_at) > self.config.token_ttl {
            return oauth_error(401, "invalid_token");
        }
        let Some(account) = self.config.users.get(&token.subject) else {
            return oauth_error(401, "invalid_token");
        };
        let mut body = serde_json::Map::new();
        body.insert("sub".into(), token.subject.clone().into());
        for (k, v) in &account.attributes {
            body.insert(k.clone(), v.clone().into());
        }
        st.events.push(IdpEvent::UserinfoServed {
            access_token: token.value,
            subject: token.subject,
        });
        HttpResponse::json(200, &serde_json::Value::Object(body))
    }
}

impl Server for IdentityProvider {
    fn handle(&self, req: &HttpRequest) -> HttpResponse {
        let ep = &self.config.endpoints;
        let path = req.uri().path();
        if path == ep.authorize {
            self.handle_authorize(req)
        } else if path == ep.login {
            self.handle_login(req)
        } else if path == ep.token {
            self.handle_token(req)
        } else if path == ep.userinfo {
            self.handle_userinfo(req)
        } else if path == "/" {
            HttpResponse::html(
                200,
                format!("<html><body><h1>{}</h1></body></html>", self.config.id),
            )
            .with_page(Page::new(DocumentKind::Plain))
        } else {
            error_page(404, "Not found")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::parse_uri;

    fn uri(s: &str) -> Uri {
        parse_uri(s).unwrap()
    }

    fn reg(id: &str, secret: Option<&str>, redirect: &str) -> ClientRegistration {
        ClientRegistration {
            client_id: id.into(),
            client_secret: secret.map(str::to_string),
            redirect_uri: uri(redirect),
            origin: None,
        }
    }

    fn idp(auto_grant: bool) -> IdentityProvider {
        let mut cfg = IdpConfig::new("aidp", "https://aidp.com".parse().unwrap())
            .with_user("alice", "alice-pw", &[("name", "Alice")])
            .with_user("mallory", "mallory-pw", &[("name", "Mallory")]);
        cfg.auto_grant = auto_grant;
        cfg.registered_clients = vec![
            reg("rp-a", Some("sa"), "https://rp.com/AIdP-callback"),
            reg("rp-b", Some("sb"), "https://rpb.com/cb"),
        ];
        IdentityProvider::new(cfg, 1).unwrap()
    }

    fn login(idp: &IdentityProvider, user: &str, pw: &str) -> String {
        let req = HttpRequest::post_form(
            &uri("https://aidp.com/login"),
            vec![
                ("username".into(), user.into()),
                ("password".into(), pw.into()),
            ],
        );
        let resp = idp.handle_login(&req);
        resp.set_cookies()[0].1.clone()
    }

    fn authorize(
        idp: &IdentityProvider,
        sid: Option<&str>,
        query: &[(&str, &str)],
    ) -> HttpResponse {
        let u = uri("https://aidp.com/authorize").with_query(query.iter().copied());
        let mut req = HttpRequest::get(&u);
        if let Some(s) = sid {
            req = req.with_header("Cookie", format!("{SESSION_COOKIE}={s}"));
        }
        idp.handle_authorize(&req)
    }

    const CODE_REQ: &[(&str, &str)] = &[
        ("client_id", "rp-a"),
        ("response_type", "code"),
        ("redirect_uri", "https://rp.com/AIdP-callback"),
        ("state", "xyz"),
    ];

    fn issue_code(idp: &IdentityProvider, sid: &str) -> String {
        let resp = authorize(idp, Some(sid), CODE_REQ);
        resp.location()
            .unwrap()
            .unwrap()
            .query_param("code")
            .unwrap()
            .to_string()
    }

    fn redeem(
        idp: &IdentityProvider,
        client: &str,
        secret: &str,
        code: &str,
        redirect: &str,
    ) -> HttpResponse {
        let req = HttpRequest::post_form(
            &uri("https://aidp.com/token"),
            vec![
                ("grant_type".into(), "authorization_code".into()),
                ("client_id".into(), client.into()),
                ("client_secret".into(), secret.into()),
                ("code".into(), code.into()),
                ("redirect_uri".into(), redirect.into()),
            ],
        );
        idp.handle_token(&req)
    }

    #[test]
    fn registration_rules() {
        let p = idp(false);
        assert!(p
            .register_client(reg(
                "addthis",
                None,
                "https://www.addthis.com/darkseid/account/register-facebook-return"
            ))
            .is_ok());
        assert_eq!(
            p.register_client(reg("rp-a", None, "https://x.com/")),
            Err(IdpError::DuplicateClient("rp-a".into()))
        );

        let mut cfg = IdpConfig::new("strict", "https://strict.com".parse().unwrap());
        cfg.require_https_redirect_uri = true;
        let strict = IdentityProvider::new(cfg, 1).unwrap();
        assert!(matches!(
            strict.register_client(reg("rp", None, "http://rp.com/cb")),
            Err(IdpError::InsecureRedirectUri(_))
        ));
        assert!(strict
            .register_client(reg("rp", None, "https://rp.com/cb"))
            .is_ok());
    }

    #[test]
    fn issuer_must_be_https() {
        let cfg = IdpConfig::new("plain", "http://plain.com".parse().unwrap());
        assert!(matches!(
            IdentityProvider::new(cfg, 1),
            Err(IdpError::InsecureIssuer(_))
        ));
    }

    #[test]
    fn auto_grant_code_redirect_echoes_state() {
        let p = idp(true);
        let sid = login(&p, "alice", "alice-pw");
        let resp = authorize(&p, Some(&sid), CODE_REQ);
        let loc = resp.location().unwrap().unwrap();
        assert_eq!(loc.path(), "/AIdP-callback");
        assert_eq!(loc.query_param("code").unwrap().len(), 32);
        assert_eq!(loc.query_param("state"), Some("xyz"));
        assert_eq!(loc.fragment(), None);

        let no_state: Vec<_> = CODE_REQ
            .iter()
            .copied()
            .filter(|(k, _)| *k != "state")
            .collect();
        let loc = authorize(&p, Some(&sid), &no_state)
            .location()
            .unwrap()
            .unwrap();
        assert_eq!(loc.query_param("state"), None);
    }

    #[test]
    fn token_response_type_uses_fragment() {
        let p = idp(true);
        let sid = login(&p, "alice", "alice-pw");
        let resp = authorize(
            &p,
            Some(&sid),
            &[
                ("client_id", "rp-a"),
                ("response_type", "token"),
                ("redirect_uri", "https://rp.com/AIdP-callback"),
            ],
        );
        let raw = resp.headers.get("Location").unwrap();
        assert!(raw.starts_with("https://rp.com/AIdP-callback#access_token="));
        let loc = resp.location().unwrap().unwrap();
        assert!(loc.query().is_empty());
    }

    #[test]
    fn mismatched_redirect_uri_terminates() {
        let p = idp(true);
        let sid = login(&p, "alice", "alice-pw");
        let resp = authorize(
            &p,
            Some(&sid),
            &[
                ("client_id", "rp-a"),
                ("response_type", "code"),
                ("redirect_uri", "https://attacker.com/steal"),
            ],
        );
        assert_eq!(resp.status, 400);
        assert!(resp.location().is_none());
        assert!(p.grants().is_empty());

        let resp = authorize(
            &p,
            Some(&sid),
            &[("client_id", "nobody"), ("response_type", "code")],
        );
        assert_eq!(resp.status, 400);
    }

    #[test]
    fn unsupported_response_type_redirects_with_error() {
        let p = idp(true);
        let sid = login(&p, "alice", "alice-pw");
        let resp = authorize(
            &p,
            Some(&sid),
            &[
                ("client_id", "rp-a"),
                ("response_type", "id_token"),
                ("redirect_uri", "https://rp.com/AIdP-callback"),
                ("state", "s"),
            ],
        );
        let loc = resp.location().unwrap().unwrap();
        assert_eq!(loc.query_param("error"), Some("unsupported_response_type"));
        assert_eq!(loc.query_param("state"), Some("s"));
    }

    #[test]
    fn unauthenticated_gets_login_form_then_consent() {
        let p = idp(false);
        let resp = authorize(&p, None, CODE_REQ);
        let page = resp.page.unwrap();
        assert_eq!(page.kind, DocumentKind::IdpLoginForm);
        let cont = page.actions[0]
            .form_fields
            .iter()
            .find(|(k, _)| k == "continue")
            .unwrap();
        assert!(cont.1.contains("client_id=rp-a"));

        let sid = login(&p, "alice", "alice-pw");
        let consent = authorize(&p, Some(&sid), CODE_REQ).page.unwrap();
        assert_eq!(consent.kind, DocumentKind::IdpConsentPage);
        let grant = &consent.actions[0];
        assert_eq!(grant.label, "grant");
        assert_eq!(grant.target, uri("https://aidp.com/authorize"));
        assert!(p.grants().is_empty());

        let req = HttpRequest::post_form(&grant.target, grant.form_fields.clone())
            .with_header("Cookie", format!("{SESSION_COOKIE}={sid}"));
        let resp = p.handle_authorize(&req);
        assert!(resp
            .location()
            .unwrap()
            .unwrap()
            .query_param("code")
            .is_some());
        assert!(p
            .events()
            .iter()
            .any(|e| matches!(e, IdpEvent::ConsentSubmitted { .. })));
    }

    #[test]
    fn forged_consent_without_nonce_is_refused() {
        let p = idp(false);
        let sid = login(&p, "alice", "alice-pw");
        let mut fields: Params = CODE_REQ
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        fields.push(("consent".into(), "granted".into()));
        let req = HttpRequest::post_form(&uri("https://aidp.com/authorize"), fields)
            .with_header("Cookie", format!("{SESSION_COOKIE}={sid}"));
        assert_eq!(p.handle_authorize(&req).status, 400);
        assert!(p.grants().is_empty());
    }

    #[test]
    fn login_outcomes() {
        let p = idp(false);
        let ok = p.handle_login(&HttpRequest::post_form(
            &uri("https://aidp.com/login"),
            vec![
                ("username".into(), "alice".into()),
                ("password".into(), "alice-pw".into()),
                (
                    "continue".into(),
                    "client_id=rp-a&response_type=code".into(),
                ),
            ],
        ));
        assert_eq!(ok.status, 302);
        assert_eq!(ok.set_cookies().len(), 1);
        let loc = ok.location().unwrap().unwrap();
        assert_eq!(loc.path(), "/authorize");
        assert_eq!(loc.query_param("client_id"), Some("rp-a"));

        let wrong = p.handle_login(&HttpRequest::post_form(
            &uri("https://aidp.com/login"),
            vec![
                ("username".into(), "alice".into()),
                ("password".into(), "nope".into()),
            ],
        ));
        assert_eq!(wrong.status, 200);
        assert!(wrong.set_cookies().is_empty());
        assert_eq!(wrong.page.unwrap().kind, DocumentKind::IdpLoginForm);

        let unknown = p.handle_login(&HttpRequest::post_form(
            &uri("https://aidp.com/login"),
            vec![
                ("username".into(), "eve".into()),
                ("password".into(), "x".into()),
            ],
        ));
        assert_eq!(unknown.status, 401);

        // No pending authorization: plain page, and nothing is issued.
        let plain = p.handle_login(&HttpRequest::post_form(
            &uri("https://aidp.com/login"),
            vec![
                ("username".into(), "alice".into()),
                ("password".into(), "alice-pw".into()),
            ],
        ));
        assert_eq!(plain.status, 200);
        assert_eq!(plain.page.unwrap().kind, DocumentKind::Plain);
        assert!(p.grants().is_empty());
    }

    #[test]
    fn code_redeems_exactly_once() {
        let p = idp(true);
        let sid = login(&p, "alice", "alice-pw");
        let code = issue_code(&p, &sid);
        let first = redeem(&p, "rp-a", "sa", &code, "https://rp.com/AIdP-callback");
        assert_eq!(first.status, 200);
        let body = first.json_body().unwrap();
        assert_eq!(body["token_type"], "bearer");
        assert_eq!(body["expires_in"], DEFAULT_TOKEN_TTL);
        let second = redeem(&p, "rp-a", "sa", &code, "https://rp.com/AIdP-callback");
        assert_eq!(second.json_body().unwrap()["error"], "invalid_grant");
    }

    #[test]
    fn token_endpoint_rejections() {
        let p = idp(true);
        let sid = login(&p, "alice", "alice-pw");
        let code = issue_code(&p, &sid);
        let err = |r: HttpResponse| {
            r.json_body().unwrap()["error"]
                .as_str()
                .unwrap()
                .to_string()
        };
        assert_eq!(
            err(redeem(
                &p,
                "rp-a",
                "wrong",
                &code,
                "https://rp.com/AIdP-callback"
            )),
            "invalid_client"
        );
        assert_eq!(
            err(redeem(&p, "rp-a", "sa", &code, "https://rp.com/other")),
            "invalid_grant"
        );
        // Cross-client redemption: rp-b authenticates fine but the code is not its.
        assert_eq!(
            err(redeem(
                &p,
                "rp-b",
                "sb",
                &code,
                "https://rp.com/AIdP-callback"
            )),
            "invalid_grant"
        );
        assert_eq!(
            err(redeem(
                &p,
                "rp-a",
                "sa",
                "garbage",
                "https://rp.com/AIdP-callback"
            )),
            "invalid_grant"
        );
        // None of the failures consumed the code.
        assert_eq!(
            redeem(&p, "rp-a", "sa", &code, "https://rp.com/AIdP-callback").status,
            200
        );
    }

    #[test]
    fn codes_expire() {
        let p = idp(true);
        let sid = login(&p, "alice", "alice-pw");
        let code = issue_code(&p, &sid);
        p.advance_clock(DEFAULT_CODE_TTL + 1);
        let r = redeem(&p, "rp-a", "sa", &code, "https://rp.com/AIdP-callback");
        assert_eq!(r.json_body().unwrap()["error"], "invalid_grant");
    }

    #[test]
    fn userinfo_reports_the_tokens_subject() {
        let p = idp(true);
        let userinfo = |token: &str| {
            p.handle_userinfo(&HttpRequest::get(
                &uri("https://aidp.com/userinfo").append_query("access_token", token),
            ))
        };
        for (user, pw) in [("alice", "alice-pw"), ("mallory", "mallory-pw")] {
            let sid = login(&p, user, pw);
            let code = issue_code(&p, &sid);
            let tok = redeem(&p, "rp-a", "sa", &code, "https://rp.com/AIdP-callback")
                .json_body()
                .unwrap()["access_token"]
                .as_str()
                .unwrap()
                .to_string();
            let info = userinfo(&tok).json_body().unwrap();
            assert_eq!(info["sub"], user);
        }
        assert_eq!(
            userinfo("garbage").json_body().unwrap()["error"],
            "invalid_token"
        );
    }
}
