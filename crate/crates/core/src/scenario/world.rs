use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::browser::{Action, DocumentKind, Page};
use crate::http::{HttpExchange, HttpRequest, HttpResponse, Origin, Uri};
use crate::idp::{ClientRegistration, IdentityProvider, IdpConfig, IdpError};
use crate::net::{Network, RequestRouter, RouteError, Server};
use crate::rp::{DefenceConfig, Flow, IdpBinding, RelyingParty, Resolution, RpConfig, RpError};

pub const VICTIM: &str = "victim";
pub const ATTACKER: &str = "attacker";

/// A simulated person: the browser they drive and their IdP account.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActorSpec {
    pub name: String,
    pub idp: String,
    pub username: String,
    pub password: String,
}

/// Everything needed to stand up one world: IdPs, the RP and its
/// bindings, the attacker's site and the actors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub idps: Vec<IdpConfig>,
    pub rp: RpConfig,
    pub attacker_origin: Origin,
    pub actors: Vec<ActorSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HarnessError {
    #[error("script step {step} refers to undefined actor {actor:?}")]
    UndefinedActor { step: usize, actor: String },
    #[error("actor {actor:?} has an account at unknown IdP {idp:?}")]
    UnknownIdp { actor: String, idp: String },
    #[error("binding for {0:?} names an IdP that is not in the world")]
    UnboundIdp(String),
    #[error("IdP setup failed: {0}")]
    Idp(#[from] IdpError),
    #[error("RP setup failed: {0}")]
    Rp(#[from] RpError),
    #[error("no scenario with id {0:?}")]
    UnknownScenario(String),
}

fn origin(s: &str) -> Origin {
    s.parse().expect("static origin")
}

impl WorldConfig {
    pub fn idp_mut(&mut self, id: &str) -> Option<&mut IdpConfig> {
        self.idps.iter_mut().find(|i| i.id == id)
    }

    pub fn binding_mut(&mut self, idp_id: &str) -> Option<&mut IdpBinding> {
        self.rp.bindings.iter_mut().find(|b| b.idp_id == idp_id)
    }

    pub fn actor(&self, name: &str) -> Option<&ActorSpec> {
        self.actors.iter().find(|a| a.name == name)
    }

    /// IdP the victim signs in with; the catalog's scenarios revolve around
    /// it.
    pub fn primary_idp(&self) -> String {
        self.actor(VICTIM)
            .map(|a| a.idp.clone())
            .or_else(|| self.idps.first().map(|i| i.id.clone()))
            .unwrap_or_default()
    }
}

impl Default for WorldConfig {
    /// AIdP and BIdP, an RP with a per-IdP callback for each, and
    /// attacker.com. Alice is the victim and Mallory the attacker, both with
    /// AIdP accounts.
    fn default() -> Self {
        let aidp = IdpConfig::new("aidp", origin("https://aidp.com"))
            .with_user(
                "alice",
                "alice-pw",
                &[("name", "Alice"), ("email", "alice@example.com")],
            )
            .with_user(
                "mallory",
                "mallory-pw",
                &[("name", "Mallory"), ("email", "mallory@example.com")],
            );
        let bidp = IdpConfig::new("bidp", origin("https://bidp.com")).with_user(
            "alice",
            "alice-b-pw",
            &[("name", "Alice B")],
        );
        let bind = |id: &str, display: &str| IdpBinding {
            idp_id: id.into(),
            display_name: display.into(),
            idp_origin: origin(&format!("https://{id}.com")),
            resolution: Resolution::PerIdpCallback(format!("/{display}-callback")),
            client_id: format!("rp-{id}"),
            client_secret: Some(format!("rp-{id}-secret")),
            flow: Flow::Code,
            scope: "openid profile".into(),
        };
        WorldConfig {
            idps: vec![aidp, bidp],
            rp: RpConfig {
                origin: origin("https://rp.com"),
                bindings: vec![bind("aidp", "AIdP"), bind("bidp", "BIdP")],
                defences: DefenceConfig::default(),
                idp_endpoints: BTreeMap::new(),
            },
            attacker_origin: origin("https://attacker.com"),
            actors: vec![
                ActorSpec {
                    name: VICTIM.into(),
                    idp: "aidp".into(),
                    username: "alice".into(),
                    password: "alice-pw".into(),
                },
                ActorSpec {
                    name: ATTACKER.into(),
                    idp: "aidp".into(),
                    username: "mallory".into(),
                    password: "mallory-pw".into(),
                },
            ],
        }
    }
}

/// How the attacker page delivers the stolen response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vector {
    Link,
    Image,
}

/// attacker.com: serves one page whose bait is whatever was last published.
#[derive(Debug, Default)]
pub struct AttackerSite {
    bait: Mutex<Option<(Vector, Uri)>>,
}

pub const BAIT: &str = "bait";

impl AttackerSite {
    pub fn publish(&self, vector: Vector, target: Uri) {
        *self.bait.lock().expect("attacker site poisoned") = Some((vector, target));
    }

    pub fn bait(&self) -> Option<(Vector, Uri)> {
        self.bait.lock().expect("attacker site poisoned").clone()
    }
}

impl Server for AttackerSite {
    fn handle(&self, _req: &HttpRequest) -> HttpResponse {
        let mut page = Page::new(DocumentKind::AttackerPage);
        let mut body = String::from("<html><body><h1>Free prizes</h1>");
        if let Some((vector, target)) = self.bait() {
            match vector {
                Vector::Link => {
                    body.push_str(&format!("<a href=\"{target}\">Claim</a>"));
                    page = page.with_action(Action::link(BAIT, target));
                }
                Vector::Image => {
                    body.push_str(&format!("<img src=\"{target}\">"));
                    page = page.with_action(Action::image(BAIT, target));
                }
            }
        }
        body.push_str("</body></html>");
        HttpResponse::html(200, body).with_page(page)
    }
}

/// Router that remembers every exchange it carried.
pub struct RecordingRouter {
    inner: Network,
    log: Mutex<Vec<HttpExchange>>,
}

impl RecordingRouter {
    pub fn new(inner: Network) -> Self {
        RecordingRouter {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn exchanges(&self) -> Vec<HttpExchange> {
        self.log.lock().expect("router log poisoned").clone()
    }
}

impl RequestRouter for RecordingRouter {
    fn route(&self, req: &HttpRequest) -> Result<HttpResponse, RouteError> {
        let resp = self.inner.route(req)?;
        self.log
            .lock()
            .expect("router log poisoned")
            .push(HttpExchange {
                request: req.clone(),
                response: resp.clone(),
            });
        Ok(resp)
    }
}

/// A built world: live servers wired into a network.
pub struct World {
    pub config: WorldConfig,
    /// What browsers talk to.
    pub front: Network,
    /// What the RP uses to reach IdP token and userinfo endpoints.
    pub backchannel: Arc<RecordingRouter>,
    pub idps: BTreeMap<String, Arc<IdentityProvider>>,
    pub rp: Arc<RelyingParty>,
    pub attacker: Arc<AttackerSite>,
}

impl World {
    /// Builds the servers and registers every RP binding at its IdP.
    pub fn build(config: &WorldConfig, seed: u64) -> Result<World, HarnessError> {
        let mut idps = BTreeMap::new();
        let back = Network::new();
        for cfg in &config.idps {
            let idp = Arc::new(IdentityProvider::new(cfg.clone(), seed)?);
            back.attach(cfg.issuer_origin.clone(), idp.clone());
            idps.insert(cfg.id.clone(), idp);
        }
        for b in &config.rp.bindings {
            let idp = idps
                .get(&b.idp_id)
                .ok_or_else(|| HarnessError::UnboundIdp(b.idp_id.clone()))?;
            let reg = ClientRegistration {
                client_id: b.client_id.clone(),
                client_secret: b.client_secret.clone(),
                redirect_uri: b.redirect_uri(&config.rp.origin),
                origin: (b.flow == Flow::ClientLibrary).then(|| config.rp.origin.clone()),
            };
            // A world file may already register the client itself.
            if idp.client(&b.client_id).as_ref() != Some(&reg) {
                idp.register_client(reg)?;
            }
        }
        for a in &config.actors {
            if !idps.contains_key(&a.idp) {
                return Err(HarnessError::UnknownIdp {
                    actor: a.name.clone(),
                    idp: a.idp.clone(),
                });
            }
        }

        let backchannel = Arc::new(RecordingRouter::new(back));
        let rp = Arc::new(RelyingParty::new(
            config.rp.clone(),
            backchannel.clone(),
            seed,
        )?);
        let attacker = Arc::new(AttackerSite::default());
        let front = Network::new();
        for idp in idps.values() {
            front.attach(idp.origin().clone(), idp.clone());
        }
        front.attach(config.rp.origin.clone(), rp.clone());
        front.attach(config.attacker_origin.clone(), attacker.clone());

        Ok(World {
            config: config.clone(),
            front,
            backchannel,
            idps,
            rp,
            attacker,
        })
    }

    pub fn tokens_issued(&self) -> usize {
        self.idps.values().map(|i| i.tokens().len()).sum()
    }
}
