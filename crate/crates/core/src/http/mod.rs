//! HTTP messages and URIs, modelled just far enough to replay SSO flows at
//! the header level.

mod message;
mod uri;

pub use message::{Headers, HttpExchange, HttpRequest, HttpResponse, Method};
pub use uri::{
    origin_of, parse_uri, strip_fragment_for_request, Origin, Scheme, Uri, UriComponent, UriError,
};
