//! Deterministic user agent.
//!
//! The browser models exactly the behaviour the Referer mitigation depends
//! on:
//!
//! * The `Referer` of every request in a navigation is the URL of the
//!   document that *initiated* it. A `302` hop does not rewrite it, so an
//!   automatically granted authorization response still names the page the
//!   user clicked on.
//! * A secure initiator never leaks into a plain-`http` request: the header
//!   is dropped on an HTTPS to HTTP downgrade.
//! * Fragments never go on the wire. The fragment of the most recent
//!   `Location` is retained and handed to extractor pages.
//! * XHR is same-origin only, which is what makes custom request headers an
//!   unforgeable marker.

mod cookies;
mod document;

use std::collections::BTreeSet;

use serde::Serialize;

pub use cookies::CookieJar;
pub use document::{Action, ActionKind, Document, DocumentKind, Page};

use crate::http::{HttpExchange, HttpRequest, HttpResponse, Method, Origin, Scheme, Uri, UriError};
use crate::net::{RequestRouter, RouteError};

/// Maximum number of redirects followed in one navigation.
pub const MAX_REDIRECTS: usize = 10;

pub const USER_AGENT: &str = "sso-sandbox/0.1";
pub const ACCEPT: &str = "text/html,application/xhtml+xml,application/xml;q=0.9,*/*;q=0.8";
pub const ACCEPT_LANGUAGE: &str = "en-US,en;q=0.5";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BrowserError {
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error("more than {MAX_REDIRECTS} redirects starting at {0}")]
    RedirectLoop(Uri),
    #[error("unparseable Location header: {0}")]
    BadLocation(UriError),
    #[error("redirect without a Location header")]
    MissingLocation,
    #[error("cross-origin XHR from {from} to {to} blocked")]
    BlockedCrossOrigin { from: Origin, to: Origin },
    #[error("extractor page has no fragment to read")]
    MissingFragment,
    #[error("document at {0} is not an extractor page")]
    NotExtractor(Uri),
    #[error("no action labelled {0:?} on the current page")]
    NoSuchAction(String),
    #[error("browser has no current document")]
    NoDocument,
}

/// The requests one user action caused, in order, and where the browser
/// ended up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NavigationTrace {
    pub exchanges: Vec<HttpExchange>,
    pub final_document: Option<Document>,
    /// Set when the navigation was deliberately stopped before requesting
    /// this URI (fragment included).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aborted_before: Option<Uri>,
}

/// The `Referer` a request to `target` initiated from `initiator` carries:
/// the initiator with its fragment removed, or nothing on an HTTPS to HTTP
/// downgrade.
pub fn apply_referer_policy(initiator: &Uri, target: &Uri) -> Option<Uri> {
    if initiator.scheme() == Scheme::Https && target.scheme() == Scheme::Http {
        None
    } else {
        Some(initiator.without_fragment())
    }
}

/// One simulated user agent: a cookie jar, the current document, and the
/// set of origins it has rendered documents from.
#[derive(Debug, Clone)]
pub struct Browser {
    name: String,
    jar: CookieJar,
    current: Option<Document>,
    rendered: BTreeSet<Origin>,
    /// Run extractor scripts as soon as an extractor page loads.
    pub auto_run_scripts: bool,
}

struct Fetch<'a> {
    method: Method,
    target: Uri,
    body: Option<Vec<(String, String)>>,
    custom_headers: &'a [(String, String)],
    initiator: Option<&'a Uri>,
}

impl Browser {
    pub fn new(name: &str) -> Self {
        Browser {
            name: name.to_string(),
            jar: CookieJar::new(),
            current: None,
            rendered: BTreeSet::new(),
            auto_run_scripts: true,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn jar(&self) -> &CookieJar {
        &self.jar
    }

    pub fn current(&self) -> Option<&Document> {
        self.current.as_ref()
    }

    /// Origins of every document this browser has rendered.
    pub fn rendered_origins(&self) -> &BTreeSet<Origin> {
        &self.rendered
    }

    /// Navigates to a typed-in URL. No `Referer` is sent.
    pub fn open(
        &mut self,
        url: &Uri,
        router: &dyn RequestRouter,
    ) -> Result<NavigationTrace, BrowserError> {
        let fetch = Fetch {
            method: Method::Get,
            target: url.clone(),
            body: None,
            custom_headers: &[],
            initiator: None,
        };
        let trace = self.follow(fetch, router, None)?;
        self.finish_navigation(trace, router)
    }

    /// Performs `action` from `start`, following redirects until the first
    /// non-redirect response.
    pub fn navigate(
        &mut self,
        start: &Document,
        action: &Action,
        router: &dyn RequestRouter,
    ) -> Result<NavigationTrace, BrowserError> {
        self.navigate_inner(start, action, router, None)
    }

    /// Like [`Browser::navigate`], but stops before following a redirect to
    /// `stop_before`. This is how an attacker walks an authorization flow on
    /// their own device and pockets the response instead of delivering it.
    pub fn navigate_until(
        &mut self,
        start: &Document,
        action: &Action,
        router: &dyn RequestRouter,
        stop_before: &Origin,
    ) -> Result<NavigationTrace, BrowserError> {
        self.navigate_inner(start, action, router, Some(stop_before))
    }

    /// Performs the action labelled `label` on the current document, with
    /// `fields` filled into its form.
    pub fn perform(
        &mut self,
        label: &str,
        fields: &[(String, String)],
        router: &dyn RequestRouter,
        stop_before: Option<&Origin>,
    ) -> Result<NavigationTrace, BrowserError> {
        let doc = self.current.clone().ok_or(BrowserError::NoDocument)?;
        let mut action = doc
            .action(label)
            .cloned()
            .ok_or_else(|| BrowserError::NoSuchAction(label.to_string()))?;
        for (k, v) in fields {
            action = action.with_field(k, v);
        }
        self.navigate_inner(&doc, &action, router, stop_before)
    }

    fn navigate_inner(
        &mut self,
        start: &Document,
        action: &Action,
        router: &dyn RequestRouter,
        stop_before: Option<&Origin>,
    ) -> Result<NavigationTrace, BrowserError> {
        match action.kind {
            ActionKind::RunExtractor => return self.run_extractor(start, router),
            ActionKind::Xhr => {
                let exchange = self.xhr_with(
                    start,
                    &action.target,
                    action.method(),
                    action.form_fields.clone(),
                    &action.custom_headers,
                    router,
                )?;
                return Ok(NavigationTrace {
                    exchanges: vec![exchange],
                    final_document: Some(start.clone()),
                    aborted_before: None,
                });
            }
            _ => {}
        }
        let body = (action.method() == Method::Post).then(|| action.form_fields.clone());
        let fetch = Fetch {
            method: action.method(),
            target: action.target.clone(),
            body,
            custom_headers: &[],
            initiator: Some(&start.url),
        };
        let trace = self.follow(fetch, router, stop_before)?;
        if action.kind == ActionKind::LoadImage || trace.aborted_before.is_some() {
            // Subresource loads and aborted flows leave the page as it was.
            return Ok(trace);
        }
        self.finish_navigation(trace, router)
    }

    fn finish_navigation(
        &mut self,
        mut trace: NavigationTrace,
        router: &dyn RequestRouter,
    ) -> Result<NavigationTrace, BrowserError> {
        let Some(doc) = trace.final_document.clone() else {
            return Ok(trace);
        };
        self.rendered.insert(doc.url.origin());
        self.current = Some(doc.clone());
        if self.auto_run_scripts && doc.kind == DocumentKind::ExtractorPage {
            let script = self.run_extractor(&doc, router)?;
            trace.exchanges.extend(script.exchanges);
        }
        Ok(trace)
    }

    fn follow(
        &mut self,
        fetch: Fetch<'_>,
        router: &dyn RequestRouter,
        stop_before: Option<&Origin>,
    ) -> Result<NavigationTrace, BrowserError> {
        let start = fetch.target.clone();
        let mut exchanges = Vec::new();
        let mut method = fetch.method;
        let mut body = fetch.body;
        let mut target = fetch.target;
        let mut retained_fragment = target.fragment().map(str::to_string);

        for hop in 0..=MAX_REDIRECTS {
            if hop > 0 && stop_before == Some(&target.origin()) {
                return Ok(NavigationTrace {
                    exchanges,
                    final_document: None,
                    aborted_before: Some(target),
                });
            }
            let mut req = HttpRequest::new(method, &target);
            self.decorate(&mut req, fetch.initiator, fetch.custom_headers);
            req.body = body.take();
            let resp = router.route(&req)?;
            self.absorb_cookies(&target, &resp);

            if resp.is_redirect() {
                let next = match resp.location() {
                    Some(Ok(next)) => next,
                    Some(Err(e)) => return Err(BrowserError::BadLocation(e)),
                    None => return Err(BrowserError::MissingLocation),
                };
                if let Some(frag) = next.fragment() {
                    retained_fragment = Some(frag.to_string());
                }
                exchanges.push(HttpExchange {
                    request: req,
                    response: resp,
                });
                target = next;
                method = Method::Get;
                continue;
            }

            let page = resp
                .page
                .clone()
                .unwrap_or_else(|| Page::new(DocumentKind::Plain));
            let mut url = target.without_fragment();
            if page.kind == DocumentKind::ExtractorPage {
                if let Some(frag) = &retained_fragment {
                    if let Ok(with) = url.clone().with_fragment(frag) {
                        url = with;
                    }
                }
            }
            let mut doc = Document::new(url, page.kind);
            doc.actions = page.actions;
            exchanges.push(HttpExchange {
                request: req,
                response: resp,
            });
            return Ok(NavigationTrace {
                exchanges,
                final_document: Some(doc),
                aborted_before: None,
            });
        }
        Err(BrowserError::RedirectLoop(start))
    }

    /// Adds the headers a browser sets on its own, in the order the listings
    /// show them.
    fn decorate(
        &self,
        req: &mut HttpRequest,
        initiator: Option<&Uri>,
        custom_headers: &[(String, String)],
    ) {
        let target = req.uri().clone();
        req.headers.append("User-Agent", USER_AGENT);
        req.headers.append("Accept", ACCEPT);
        req.headers.append("Accept-Language", ACCEPT_LANGUAGE);
        for (k, v) in custom_headers {
            req.headers.append(k.clone(), v.clone());
        }
        if let Some(referer) = initiator.and_then(|i| apply_referer_policy(i, &target)) {
            req.headers.append("Referer", referer.to_string());
        }
        if let Some(cookie) = self.jar.header_for(target.host()) {
            req.headers.append("Cookie", cookie);
        }
        req.headers.append("Connection", "close");
    }

    fn absorb_cookies(&mut self, target: &Uri, resp: &HttpResponse) {
        for (name, value) in resp.set_cookies() {
            self.jar.store(target.host(), &name, &value);
        }
    }

    /// Runs the extractor script of `doc`: reads the parameters out of the
    /// retained fragment and posts them back to the page's own origin.
    pub fn run_extractor(
        &mut self,
        doc: &Document,
        router: &dyn RequestRouter,
    ) -> Result<NavigationTrace, BrowserError> {
        if doc.kind != DocumentKind::ExtractorPage {
            return Err(BrowserError::NotExtractor(doc.url.clone()));
        }
        match doc.url.fragment() {
            Some(f) if !f.is_empty() => {}
            _ => return Err(BrowserError::MissingFragment),
        }
        let script = doc
            .actions
            .iter()
            .find(|a| a.kind == ActionKind::RunExtractor)
            .ok_or_else(|| BrowserError::NoSuchAction("extractor script".to_string()))?;
        let mut fields = script.form_fields.clone();
        fields.extend(doc.url.fragment_params());
        let exchange = self.xhr_with(
            doc,
            &script.target,
            script.method(),
            fields,
            &script.custom_headers,
            router,
        )?;
        Ok(NavigationTrace {
            exchanges: vec![exchange],
            final_document: Some(doc.clone()),
            aborted_before: None,
        })
    }

    /// Same-origin `XMLHttpRequest` carrying `custom_headers`.
    pub fn xhr(
        &mut self,
        doc: &Document,
        target: &Uri,
        custom_headers: &[(String, String)],
        router: &dyn RequestRouter,
    ) -> Result<HttpExchange, BrowserError> {
        self.xhr_with(doc, target, Method::Get, Vec::new(), custom_headers, router)
    }

    fn xhr_with(
        &mut self,
        doc: &Document,
        target: &Uri,
        method: Method,
        fields: Vec<(String, String)>,
        custom_headers: &[(String, String)],
        router: &dyn RequestRouter,
    ) -> Result<HttpExchange, BrowserError> {
        let from = doc.url.origin();
        let to = target.origin();
        if from != to {
            return Err(BrowserError::BlockedCrossOrigin { from, to });
        }
        let mut req = match method {
            Method::Post => HttpRequest::new(method, target),
            Method::Get => HttpRequest::new(
                method,
                &fields
                    .iter()
                    .fold(target.clone(), |u, (k, v)| u.append_query(k, v)),
            ),
        };
        self.decorate(&mut req, Some(&doc.url), custom_headers);
        if method == Method::Post {
            req.body = Some(fields);
        }
        let resp = router.route(&req)?;
        self.absorb_cookies(target, &resp);
        Ok(HttpExchange {
            request: req,
            response: resp,
        })
    }
}
