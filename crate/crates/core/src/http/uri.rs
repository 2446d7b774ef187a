//! Absolute `http`/`https` URIs and web origins.
//!
//! The model is deliberately narrow: userinfo, IPv6 literals and non-web
//! schemes are rejected. Query strings are kept as an ordered list of decoded
//! `(name, value)` pairs; the fragment is kept verbatim because only the user
//! agent ever reads it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// URI scheme. Only the two web schemes are modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scheme {
    Http,
    Https,
}

impl Scheme {
    pub fn default_port(self) -> u16 {
        match self {
            Scheme::Http => 80,
            Scheme::Https => 443,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Http => "http",
            Scheme::Https => "https",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The part of a URI a parse error was found in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UriComponent {
    Scheme,
    Host,
    Port,
    Path,
    Query,
    Fragment,
}

impl fmt::Display for UriComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UriComponent::Scheme => "scheme",
            UriComponent::Host => "host",
            UriComponent::Port => "port",
            UriComponent::Path => "path",
            UriComponent::Query => "query",
            UriComponent::Fragment => "fragment",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed URI {component}: {reason}")]
pub struct UriError {
    pub component: UriComponent,
    pub reason: &'static str,
}

impl UriError {
    fn new(component: UriComponent, reason: &'static str) -> Self {
        UriError { component, reason }
    }
}

/// An absolute web URI.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Uri {
    scheme: Scheme,
    host: String,
    port: u16,
    path: String,
    query: Vec<(String, String)>,
    fragment: Option<String>,
}

/// Parses an absolute `http` or `https` URL.
pub fn parse_uri(text: &str) -> Result<Uri, UriError> {
    text.parse()
}

/// Returns the `(scheme, host, effective port)` triple of `uri`.
pub fn origin_of(uri: &Uri) -> Origin {
    uri.origin()
}

/// Returns a copy of `uri` suitable for a request line: fragments stay in the
/// user agent.
pub fn strip_fragment_for_request(uri: &Uri) -> Uri {
    uri.without_fragment()
}

impl Uri {
    /// Builds a URI from parts. `path` must start with `/` and must not
    /// contain `?` or `#`.
    pub fn new(scheme: Scheme, host: &str, path: &str) -> Result<Uri, UriError> {
        let host = parse_host(host)?;
        validate_path(path)?;
        Ok(Uri {
            scheme,
            port: scheme.default_port(),
            host,
            path: path.to_string(),
            query: Vec::new(),
            fragment: None,
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn host(&self) -> &str {
        &self.host
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn query(&self) -> &[(String, String)] {
        &self.query
    }

    pub fn fragment(&self) -> Option<&str> {
        self.fragment.as_deref()
    }

    /// First query value named `name`.
    pub fn query_param(&self, name: &str) -> Option<&str> {
        self.query
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    /// The fragment decoded as `application/x-www-form-urlencoded` pairs, the
    /// way an implicit-grant response carries its parameters.
    pub fn fragment_params(&self) -> Vec<(String, String)> {
        match &self.fragment {
            Some(f) => form_urlencoded::parse(f.as_bytes()).into_owned().collect(),
            None => Vec::new(),
        }
    }

    pub fn origin(&self) -> Origin {
        Origin {
            scheme: self.scheme,
            host: self.host.clone(),
            port: self.port,
        }
    }

    pub fn with_port(mut self, port: u16) -> Uri {
        self.port = port;
        self
    }

    pub fn with_path(mut self, path: &str) -> Result<Uri, UriError> {
        validate_path(path)?;
        self.path = path.to_string();
        Ok(self)
    }

    pub fn with_query<I, K, V>(mut self, pairs: I) -> Uri
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        self.query = pairs
            .into_iter()
            .map(|(k, v)| (k.into(), v.into()))
            .collect();
        self
    }

    pub fn append_query(mut self, name: &str, value: &str) -> Uri {
        self.query.push((name.to_string(), value.to_string()));
        self
    }

    /// Replaces the fragment with form-encoded `pairs`.
    pub fn with_fragment_params<I, K, V>(mut self, pairs: I) -> Uri
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut ser = form_urlencoded::Serializer::new(String::new());
        for (k, v) in pairs {
            ser.append_pair(k.as_ref(), v.as_ref());
        }
        self.fragment = Some(ser.finish());
        self
    }

    /// Replaces the fragment verbatim. Fails on characters that cannot appear
    /// in a serialized URI.
    pub fn with_fragment(mut self, fragment: &str) -> Result<Uri, UriError> {
        validate_fragment(fragment)?;
        self.fragment = Some(fragment.to_string());
        Ok(self)
    }

    pub fn without_fragment(&self) -> Uri {
        Uri {
            fragment: None,
            ..self.clone()
        }
    }

    /// Serialized query string without the leading `?`.
    pub fn query_string(&self) -> String {
        encode_pairs(&self.query)
    }

    /// Origin-form request target: path plus query, never the fragment.
    pub fn request_target(&self) -> String {
        if self.query.is_empty() {
            self.path.clone()
        } else {
            format!("{}?{}", self.path, self.query_string())
        }
    }

    /// Value of the `Host` header for a request to this URI.
    pub fn host_header(&self) -> String {
        if self.port == self.scheme.default_port() {
            self.host.clone()
        } else {
            format!("{}:{}", self.host, self.port)
        }
    }
}

pub(crate) fn encode_pairs(pairs: &[(String, String)]) -> String {
    let mut ser = form_urlencoded::Serializer::new(String::new());
    for (k, v) in pairs {
        ser.append_pair(k, v);
    }
    ser.finish()
}

impl fmt::Display for Uri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}://{}{}", self.scheme, self.host_header(), self.path)?;
        if !self.query.is_empty() {
            write!(f, "?{}", self.query_string())?;
        }
        if let Some(frag) = &self.fragment {
            write!(f, "#{frag}")?;
        }
        Ok(())
    }
}

impl FromStr for Uri {
    type Err = UriError;

    fn from_str(text: &str) -> Result<Uri, UriError> {
        let (scheme_text, rest) = text
            .split_once("://")
            .ok_or(UriError::new(UriComponent::Scheme, "missing \"://\""))?;
        let scheme = if scheme_text.eq_ignore_ascii_case("http") {
            Scheme::Http
        } else if scheme_text.eq_ignore_ascii_case("https") {
            Scheme::Https
        } else {
            return Err(UriError::new(
                UriComponent::Scheme,
                "only http and https are supported",
            ));
        };

        let (before_fragment, fragment) = match rest.split_once('#') {
            Some((head, frag)) => (head, Some(frag)),
            None => (rest, None),
        };
        let (before_query, query) = match before_fragment.split_once('?') {
            Some((head, q)) => (head, Some(q)),
            None => (before_fragment, None),
        };
        let (authority, path) = match before_query.find('/') {
            Some(idx) => before_query.split_at(idx),
            None => (before_query, "/"),
        };

        let (host_text, port) = match authority.rsplit_once(':') {
            Some((host, port_text)) => (host, parse_port(port_text)?),
            None => (authority, scheme.default_port()),
        };
        let host = parse_host(host_text)?;
        validate_path(path)?;

        let query = match query {
            Some(q) => {
                if q.chars().any(forbidden) {
                    return Err(UriError::new(
                        UriComponent::Query,
                        "contains whitespace or control characters",
                    ));
                }
                form_urlencoded::parse(q.as_bytes()).into_owned().collect()
            }
            None => Vec::new(),
        };
        if let Some(frag) = fragment {
            validate_fragment(frag)?;
        }

        Ok(Uri {
            scheme,
            host,
            port,
            path: path.to_string(),
            query,
            fragment: fragment.map(str::to_string),
        })
    }
}

fn forbidden(c: char) -> bool {
    c.is_whitespace() || c.is_control()
}

fn parse_port(text: &str) -> Result<u16, UriError> {
    if text.is_empty() || text.len() > 5 || !text.bytes().all(|b| b.is_ascii_digit()) {
        return Err(UriError::new(
            UriComponent::Port,
            "port must be 1 to 5 decimal digits",
        ));
    }
    match text.parse::<u16>() {
        Ok(0) | Err(_) => Err(UriError::new(UriComponent::Port, "port out of range")),
        Ok(p) => Ok(p),
    }
}

fn parse_host(text: &str) -> Result<String, UriError> {
    if text.is_empty() {
        return Err(UriError::new(UriComponent::Host, "empty host"));
    }
    if text.contains('@') {
        return Err(UriError::new(
            UriComponent::Host,
            "userinfo is not supported",
        ));
    }
    let host = text.to_ascii_lowercase();
    let labels_ok = host.split('.').all(|label| {
        !label.is_empty()
            && label.len() <= 63
            && label
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'-')
            && !label.starts_with('-')
            && !label.ends_with('-')
    });
    if !labels_ok || host.len() > 253 {
        return Err(UriError::new(UriComponent::Host, "not a DNS name"));
    }
    Ok(host)
}

fn validate_path(path: &str) -> Result<(), UriError> {
    if !path.starts_with('/') {
        return Err(UriError::new(
            UriComponent::Path,
            "path must start with '/'",
        ));
    }
    if path.contains(['?', '#']) || path.chars().any(forbidden) {
        return Err(UriError::new(
            UriComponent::Path,
            "invalid character in path",
        ));
    }
    Ok(())
}

fn validate_fragment(fragment: &str) -> Result<(), UriError> {
    if fragment.contains('#') || fragment.chars().any(forbidden) {
        return Err(UriError::new(
            UriComponent::Fragment,
            "invalid character in fragment",
        ));
    }
    Ok(())
}

impl Serialize for Uri {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Uri {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// A web origin. Two origins are equal iff scheme, host and port all match.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Origin {
    pub scheme: Scheme,
    pub host: String,
    pub port: u16,
}

impl Origin {
    pub fn new(scheme: Scheme, host: &str) -> Result<Origin, UriError> {
        Ok(Origin {
            scheme,
            host: parse_host(host)?,
            port: scheme.default_port(),
        })
    }

    pub fn with_port(mut self, port: u16) -> Origin {
        self.port = port;
        self
    }

    /// The origin's root document URI, `scheme://host[:port]/`.
    pub fn root(&self) -> Uri {
        Uri {
            scheme: self.scheme,
            host: self.host.clone(),
            port: self.port,
            path: "/".to_string(),
            query: Vec::new(),
            fragment: None,
        }
    }

    /// A URI on this origin with the given path.
    pub fn at(&self, path: &str) -> Result<Uri, UriError> {
        self.root().with_path(path)
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.port == self.scheme.default_port() {
            write!(f, "{}://{}", self.scheme, self.host)
        } else {
            write!(f, "{}://{}:{}", self.scheme, self.host, self.port)
        }
    }
}

impl FromStr for Origin {
    type Err = UriError;

    fn from_str(s: &str) -> Result<Origin, UriError> {
        Ok(parse_uri(s)?.origin())
    }
}

impl Serialize for Origin {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Origin {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_listing_referer() {
        let u = parse_uri("https://AIdP.com/").unwrap();
        assert_eq!(u.scheme(), Scheme::Https);
        assert_eq!(u.host(), "aidp.com");
        assert_eq!(u.port(), 443);
        assert_eq!(u.path(), "/");
        assert!(u.query().is_empty());
        assert_eq!(u.fragment(), None);
    }

    #[test]
    fn isolates_fragment() {
        let u = parse_uri("https://rp.com/AIdP-callback#access_token=X").unwrap();
        assert_eq!(u.path(), "/AIdP-callback");
        assert_eq!(u.fragment(), Some("access_token=X"));
        assert_eq!(
            u.fragment_params(),
            vec![("access_token".to_string(), "X".to_string())]
        );
    }

    #[test]
    fn preserves_query_order_and_duplicates() {
        let u = parse_uri("http://h/p?a=1&a=2").unwrap();
        assert_eq!(
            u.query(),
            &[
                ("a".to_string(), "1".to_string()),
                ("a".to_string(), "2".to_string())
            ]
        );
    }

    #[test]
    fn missing_path_defaults_to_root() {
        let u = parse_uri("https://attacker.com").unwrap();
        assert_eq!(u.path(), "/");
        assert_eq!(u.to_string(), "https://attacker.com/");
    }

    #[test]
    fn origin_default_and_explicit_ports() {
        let u = parse_uri("https://aidp.com/").unwrap();
        assert_eq!(
            origin_of(&u),
            Origin {
                scheme: Scheme::Https,
                host: "aidp.com".into(),
                port: 443
            }
        );
        let u = parse_uri("http://rp.com:8080/").unwrap();
        assert_eq!(
            origin_of(&u),
            Origin {
                scheme: Scheme::Http,
                host: "rp.com".into(),
                port: 8080
            }
        );
        let u = parse_uri("https://attacker.com/x?y=1").unwrap();
        assert_eq!(origin_of(&u).to_string(), "https://attacker.com");
    }

    #[test]
    fn explicit_default_port_is_same_origin() {
        let a = parse_uri("https://rp.com:443/a").unwrap().origin();
        let b = parse_uri("https://rp.com/b").unwrap().origin();
        assert_eq!(a, b);
        let c = parse_uri("http://rp.com:443/").unwrap().origin();
        assert_ne!(a, c);
    }

    #[test]
    fn strip_fragment_cases() {
        let u = parse_uri("https://rp.com/AIdP-callback#access_token=T").unwrap();
        let s = strip_fragment_for_request(&u);
        assert_eq!(s.fragment(), None);
        assert_eq!(u.fragment(), Some("access_token=T"));
        assert_eq!(s.path(), u.path());

        let plain = parse_uri("https://rp.com/x?a=b").unwrap();
        assert_eq!(strip_fragment_for_request(&plain), plain);

        let empty = parse_uri("https://rp.com/x#").unwrap();
        assert_eq!(empty.fragment(), Some(""));
        assert_eq!(strip_fragment_for_request(&empty).fragment(), None);
    }

    #[test]
    fn errors_name_the_component() {
        let cases = [
            ("ftp://x/", UriComponent::Scheme),
            ("rp.com/cb", UriComponent::Scheme),
            ("https:///cb", UriComponent::Host),
            ("https://user@rp.com/", UriComponent::Host),
            ("https://rp..com/", UriComponent::Host),
            ("https://rp.com:/", UriComponent::Port),
            ("https://rp.com:99999/", UriComponent::Port),
            ("https://rp.com:0/", UriComponent::Port),
            ("https://rp.com/a b", UriComponent::Path),
            ("https://rp.com/?a=\n", UriComponent::Query),
            ("https://rp.com/#a b", UriComponent::Fragment),
        ];
        for (text, component) in cases {
            let err = parse_uri(text).unwrap_err();
            assert_eq!(err.component, component, "{text}");
        }
    }

    #[test]
    fn request_target_never_has_fragment() {
        let u = parse_uri("https://rp.com/cb?code=abc#access_token=T").unwrap();
        assert_eq!(u.request_target(), "/cb?code=abc");
    }

    fn host_strategy() -> impl Strategy<Value = String> {
        proptest::collection::vec("[a-zA-Z0-9]{1,8}", 1..4).prop_map(|l| l.join("."))
    }

    fn uri_strategy() -> impl Strategy<Value = String> {
        (
            prop_oneof![Just("http"), Just("https"), Just("HTTPS")],
            host_strategy(),
            proptest::option::of(1u16..=65535),
            "(/[a-zA-Z0-9._~%-]{0,6}){0,3}",
            proptest::option::of(proptest::collection::vec(
                ("[a-z_]{1,5}", "[ -~]{0,6}"),
                0..4,
            )),
            proptest::option::of("[a-zA-Z0-9=&_.-]{0,12}"),
        )
            .prop_map(|(scheme, host, port, path, query, frag)| {
                let mut s = format!("{scheme}://{host}");
                if let Some(p) = port {
                    s.push_str(&format!(":{p}"));
                }
                s.push_str(&path);
                if let Some(q) = query {
                    s.push('?');
                    s.push_str(&encode_pairs(&q.into_iter().collect::<Vec<_>>()));
                }
                if let Some(f) = frag {
                    s.push('#');
                    s.push_str(&f);
                }
                s
            })
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(text in uri_strategy()) {
            let parsed = parse_uri(&text).unwrap();
            let again = parse_uri(&parsed.to_string()).unwrap();
            prop_assert_eq!(&parsed, &again);
            prop_assert!(!parsed.request_target().contains('#'));
        }

        #[test]
        fn parse_is_total(text in "\\PC{0,40}") {
            let _ = parse_uri(&text);
        }
    }
}
