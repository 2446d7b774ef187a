//! Plain-text rendering of requests: request line without version, then one
//! header per line, with privacy-sensitive values elided as `***`.

use crate::http::{HttpExchange, HttpRequest};

pub const ELIDED: &str = "***";

/// Parameters whose values are secrets or opaque nonces.
const OPAQUE_PARAMS: &[&str] = &[
    "code",
    "access_token",
    "state",
    "client_secret",
    "id_token",
    "password",
];

fn elide_pairs(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| {
            let v = if OPAQUE_PARAMS.contains(&k.as_str()) {
                ELIDED.to_string()
            } else {
                form_urlencoded::byte_serialize(v.as_bytes()).collect()
            };
            let k: String = form_urlencoded::byte_serialize(k.as_bytes()).collect();
            format!("{k}={v}")
        })
        .collect::<Vec<_>>()
        .join("&")
}

fn render_header(name: &str, value: &str) -> String {
    let shown = match name.to_ascii_lowercase().as_str() {
        "user-agent" | "accept" | "cookie" | "authorization" => ELIDED.to_string(),
        // The guard only looks at the origin, and so does the listing.
        "referer" => match crate::http::parse_uri(value) {
            Ok(u) => format!("{}/", u.origin()),
            Err(_) => value.to_string(),
        },
        _ => value.to_string(),
    };
    format!("{name}: {shown}")
}

pub fn render_request(req: &HttpRequest) -> String {
    let uri = req.uri();
    let mut line = format!("{} {}", req.method, uri.path());
    if !uri.query().is_empty() {
        line.push('?');
        line.push_str(&elide_pairs(uri.query()));
    }
    let mut out = vec![line];
    out.extend(req.headers.iter().map(|(k, v)| render_header(k, v)));
    if let Some(body) = &req.body {
        out.push(String::new());
        out.push(elide_pairs(body));
    }
    let mut text = out.join("\n");
    text.push('\n');
    text
}

/// Listing text for the request side of `exchange`.
pub fn render_listing(exchange: &HttpExchange) -> String {
    render_request(&exchange.request)
}

/// The `Referer:` line of a rendered listing, if it has one.
pub fn referer_line(listing: &str) -> Option<&str> {
    listing.lines().find(|l| l.starts_with("Referer: "))
}
