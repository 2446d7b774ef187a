//! Requests, responses and the ordered header multimap they share.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::uri::{encode_pairs, parse_uri, Uri, UriError};
use crate::browser::Page;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Get,
    Post,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Get => "GET",
            Method::Post => "POST",
        })
    }
}

/// Header multimap. Insertion order is preserved; lookups are
/// case-insensitive on the name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Headers(Vec<(String, String)>);

impl Headers {
    pub fn new() -> Self {
        Headers(Vec::new())
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn get_all<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.0
            .iter()
            .filter(move |(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn append(&mut self, name: impl Into<String>, value: impl Into<String>) {
        self.0.push((name.into(), value.into()));
    }

    /// Replaces the first header called `name` in place, or appends it.
    pub fn set(&mut self, name: &str, value: impl Into<String>) {
        let value = value.into();
        match self
            .0
            .iter_mut()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
        {
            Some(slot) => slot.1 = value,
            None => self.0.push((name.to_string(), value)),
        }
    }

    pub fn remove(&mut self, name: &str) {
        self.0.retain(|(k, _)| !k.eq_ignore_ascii_case(name));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A request as it appears on the wire. The target URI never carries a
/// fragment and the first header is always `Host`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpRequest {
    pub method: Method,
    uri: Uri,
    pub headers: Headers,
    pub body: Option<Vec<(String, String)>>,
}

impl HttpRequest {
    pub fn new(method: Method, uri: &Uri) -> Self {
        let uri = uri.without_fragment();
        let mut headers = Headers::new();
        headers.append("Host", uri.host_header());
        HttpRequest {
            method,
            uri,
            headers,
            body: None,
        }
    }

    pub fn get(uri: &Uri) -> Self {
        Self::new(Method::Get, uri)
    }

    pub fn post_form(uri: &Uri, fields: Vec<(String, String)>) -> Self {
        let mut req = Self::new(Method::Post, uri);
        req.body = Some(fields);
        req
    }

    pub fn uri(&self) -> &Uri {
        &self.uri
    }

    pub fn with_header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.append(name, value);
        self
    }

    pub fn referer(&self) -> Option<&str> {
        self.headers.get("Referer")
    }

    /// Value of cookie `name` from the `Cookie` header.
    pub fn cookie(&self, name: &str) -> Option<&str> {
        self.headers.get_all("Cookie").find_map(|line| {
            line.split(';').find_map(|pair| {
                let (k, v) = pair.trim().split_once('=')?;
                (k == name).then_some(v)
            })
        })
    }

    /// Looks a parameter up in the query string, then in the form body.
    pub fn param(&self, name: &str) -> Option<&str> {
        self.uri.query_param(name).or_else(|| {
            self.body
                .as_ref()?
                .iter()
                .find(|(k, _)| k == name)
                .map(|(_, v)| v.as_str())
        })
    }

    /// HTTP/1.1 wire serialization.
    pub fn to_wire(&self) -> String {
        let mut out = format!("{} {} HTTP/1.1\r\n", self.method, self.uri.request_target());
        for (k, v) in self.headers.iter() {
            out.push_str(&format!("{k}: {v}\r\n"));
        }
        out.push_str("\r\n");
        if let Some(body) = &self.body {
            out.push_str(&encode_pairs(body));
        }
        out
    }
}

/// A response. A `302` always carries a `Location`, whose fragment is kept
/// verbatim for the user agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Headers,
    pub body: String,
    /// Rendered page structure for the simulated user agent, standing in for
    /// a parsed DOM.
    #[serde(skip)]
    pub page: Option<Page>,
}

impl HttpResponse {
    pub fn redirect(location: &Uri) -> Self {
        let mut headers = Headers::new();
        headers.append("Location", location.to_string());
        HttpResponse {
            status: 302,
            headers,
            body: String::new(),
            page: None,
        }
    }

    pub fn html(status: u16, body: impl Into<String>) -> Self {
        let mut headers = Headers::new();
        headers.append("Content-Type", "text/html");
        HttpResponse {
            status,
            headers,
            body: body.into(),
            page: None,
        }
    }

    pub fn json(status: u16, value: &serde_json::Value) -> Self {
        let mut headers = Headers::new();
        headers.append("Content-Type", "application/json");
        HttpResponse {
            status,
            headers,
            body: value.to_string(),
            page: None,
        }
    }

    pub fn with_page(mut self, page: Page) -> Self {
        self.page = Some(page);
        self
    }

    pub fn with_set_cookie(mut self, name: &str, value: &str) -> Self {
        self.headers.append("Set-Cookie", format!("{name}={value}"));
        self
    }

    pub fn is_redirect(&self) -> bool {
        self.status == 302
    }

    pub fn location(&self) -> Option<Result<Uri, UriError>> {
        self.headers.get("Location").map(parse_uri)
    }

    /// `(name, value)` of every `Set-Cookie`, attributes dropped.
    pub fn set_cookies(&self) -> Vec<(String, String)> {
        self.headers
            .get_all("Set-Cookie")
            .filter_map(|line| {
                let first = line.split(';').next()?;
                let (k, v) = first.trim().split_once('=')?;
                Some((k.to_string(), v.to_string()))
            })
            .collect()
    }

    pub fn json_body(&self) -> Option<serde_json::Value> {
        serde_json::from_str(&self.body).ok()
    }

    pub fn reason(&self) -> &'static str {
        match self.status {
            200 => "OK",
            302 => "Found",
            400 => "Bad Request",
            401 => "Unauthorized",
            403 => "Forbidden",
            404 => "Not Found",
            502 => "Bad Gateway",
            _ => "",
        }
    }
}

/// One request and the response it got.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpExchange {
    pub request: HttpRequest,
    pub response: HttpResponse,
}
