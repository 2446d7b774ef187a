//! In-process request routing between simulated hosts.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use crate::http::{HttpRequest, HttpResponse, Origin};

/// Anything that answers HTTP requests for one origin.
pub trait Server: Send + Sync {
    fn handle(&self, req: &HttpRequest) -> HttpResponse;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RouteError {
    #[error("no server for origin {0}")]
    UnknownOrigin(Origin),
}

/// Delivers a request to whichever server owns its origin. Implementations
/// must tolerate concurrent dispatch from several user agents.
pub trait RequestRouter: Send + Sync {
    fn route(&self, req: &HttpRequest) -> Result<HttpResponse, RouteError>;
}

/// A table of origins to servers.
#[derive(Default)]
pub struct Network {
    hosts: RwLock<BTreeMap<Origin, Arc<dyn Server>>>,
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn attach(&self, origin: Origin, server: Arc<dyn Server>) {
        self.hosts
            .write()
            .expect("network table poisoned")
            .insert(origin, server);
    }

    pub fn origins(&self) -> Vec<Origin> {
        self.hosts
            .read()
            .expect("network table poisoned")
            .keys()
            .cloned()
            .collect()
    }
}

impl RequestRouter for Network {
    fn route(&self, req: &HttpRequest) -> Result<HttpResponse, RouteError> {
        let origin = req.uri().origin();
        let server = self
            .hosts
            .read()
            .expect("network table poisoned")
            .get(&origin)
            .cloned()
            .ok_or(RouteError::UnknownOrigin(origin))?;
        Ok(server.handle(req))
    }
}

impl<F> Server for F
where
    F: Fn(&HttpRequest) -> HttpResponse + Send + Sync,
{
    fn handle(&self, req: &HttpRequest) -> HttpResponse {
        self(req)
    }
}
