//! Protocol invariants checked after every scenario run.

use std::collections::{BTreeMap, BTreeSet};

use super::{Assertion, World};
use crate::browser::{Browser, NavigationTrace};
use crate::http::{parse_uri, HttpRequest, Scheme};
use crate::idp::{GrantKind, IdpEvent};
use crate::rp::CallbackOutcome;

pub struct InvariantInput<'a> {
    pub world: &'a World,
    /// Every trace, tagged with the actor whose browser produced it, in the
    /// order the steps ran.
    pub traces: &'a [(&'a str, &'a NavigationTrace)],
    pub browsers: &'a BTreeMap<String, Browser>,
}

fn assertion(name: &str, violations: Vec<String>) -> Assertion {
    Assertion {
        name: format!("invariant: {name}"),
        passed: violations.is_empty(),
        detail: if violations.is_empty() {
            "holds".to_string()
        } else {
            violations.join("; ")
        },
    }
}

fn requests<'a>(input: &'a InvariantInput<'a>) -> impl Iterator<Item = (&'a str, &'a HttpRequest)> {
    input
        .traces
        .iter()
        .flat_map(|(actor, t)| t.exchanges.iter().map(move |e| (*actor, &e.request)))
}

fn single_use_codes(input: &InvariantInput) -> Vec<String> {
    let mut redeemed: BTreeMap<String, usize> = BTreeMap::new();
    for idp in input.world.idps.values() {
        for e in idp.events() {
            if let IdpEvent::CodeRedeemed { code, .. } = e {
                *redeemed.entry(code).or_default() += 1;
            }
        }
    }
    redeemed
        .into_iter()
        .filter(|(_, n)| *n > 1)
        .map(|(code, n)| format!("code {code} redeemed {n} times"))
        .collect()
}

fn grant_binding(input: &InvariantInput) -> Vec<String> {
    let mut out = Vec::new();
    for (id, idp) in &input.world.idps {
        let grants: BTreeMap<_, _> = idp
            .grants()
            .into_iter()
            .map(|g| (g.value.clone(), g))
            .collect();
        let tokens: BTreeMap<_, _> = idp
            .tokens()
            .into_iter()
            .map(|t| (t.value.clone(), t))
            .collect();
        for t in tokens.values() {
            match grants.get(&t.grant) {
                Some(g) if g.subject == t.subject => {}
                Some(g) => out.push(format!(
                    "{id}: token for {} from grant of {}",
                    t.subject, g.subject
                )),
                None => out.push(format!("{id}: token {} has no grant", t.value)),
            }
        }
        for e in idp.events() {
            if let IdpEvent::UserinfoServed {
                access_token,
                subject,
            } = e
            {
                if tokens.get(&access_token).map(|t| &t.subject) != Some(&subject) {
                    out.push(format!(
                        "{id}: userinfo served {subject} for a token of someone else"
                    ));
                }
            }
        }
        // No grant for an unregistered (client_id, redirect_uri) pair.
        for g in grants.values() {
            match idp.client(&g.client_id) {
                Some(c) if c.redirect_uri == g.redirect_uri => {}
                _ => out.push(format!(
                    "{id}: grant for unregistered pair ({}, {})",
                    g.client_id, g.redirect_uri
                )),
            }
        }
    }
    out
}

fn consent_precedes_grant(input: &InvariantInput) -> Vec<String> {
    let mut out = Vec::new();
    for (id, idp) in &input.world.idps {
        if idp.config().auto_grant {
            continue;
        }
        let mut consented: BTreeSet<(String, String)> = BTreeSet::new();
        for e in idp.events() {
            match e {
                IdpEvent::ConsentSubmitted { session, client_id } => {
                    consented.insert((session, client_id));
                }
                IdpEvent::GrantIssued {
                    session,
                    client_id,
                    kind,
                    ..
                } => {
                    if !consented.remove(&(session, client_id.clone())) {
                        out.push(format!(
                            "{id}: {kind:?} for {client_id} issued without consent"
                        ));
                    }
                }
                _ => {}
            }
        }
    }
    out
}

fn fragment_never_on_wire(input: &InvariantInput) -> Vec<String> {
    let back = input.world.backchannel.exchanges();
    requests(input)
        .map(|(_, r)| r)
        .chain(back.iter().map(|e| &e.request))
        .filter(|r| r.to_wire().contains('#'))
        .map(|r| format!("'#' on the wire in request to {}", r.uri()))
        .collect()
}

/// Every cookie a browser sends to a host was set by that same host.
fn cookie_isolation(input: &InvariantInput) -> Vec<String> {
    let mut set_by: BTreeMap<(&str, String), BTreeSet<String>> = BTreeMap::new();
    let mut out = Vec::new();
    for (actor, trace) in input.traces {
        for ex in &trace.exchanges {
            let host = ex.request.uri().host().to_string();
            for line in ex.request.headers.get_all("Cookie") {
                for pair in line.split(';') {
                    let name = pair.trim().split('=').next().unwrap_or("").to_string();
                    let known = set_by
                        .get(&(*actor, host.clone()))
                        .is_some_and(|s| s.contains(&name));
                    if !known {
                        out.push(format!(
                            "{actor} sent cookie {name} to {host}, which never set it"
                        ));
                    }
                }
            }
            for (name, _) in ex.response.set_cookies() {
                set_by
                    .entry((*actor, host.clone()))
                    .or_default()
                    .insert(name);
            }
        }
    }
    out
}

/// A Referer only ever names an origin the browser rendered a page from.
fn referer_unforgeable(input: &InvariantInput) -> Vec<String> {
    let mut out = Vec::new();
    for (actor, r) in requests(input) {
        let Some(referer) = r.referer() else { continue };
        let Some(browser) = input.browsers.get(actor) else {
            continue;
        };
        match parse_uri(referer) {
            Ok(u) if browser.rendered_origins().contains(&u.origin()) => {}
            _ => out.push(format!("{actor} sent Referer {referer} it never rendered")),
        }
    }
    out
}

fn downgrade_strips_referer(input: &InvariantInput) -> Vec<String> {
    requests(input)
        .filter(|(_, r)| r.uri().scheme() == Scheme::Http)
        .filter_map(|(actor, r)| {
            let referer = r.referer()?;
            let secure = parse_uri(referer)
                .map(|u| u.scheme() == Scheme::Https)
                .unwrap_or(false);
            secure.then(|| format!("{actor} leaked https Referer to {}", r.uri()))
        })
        .collect()
}

/// With the guard enforced, no session is ever bound by a request whose
/// Referer named a foreign origin.
fn session_binding_soundness(input: &InvariantInput) -> Vec<String> {
    input
        .world
        .rp
        .events()
        .into_iter()
        .filter(|e| e.guard_enforced && e.outcome == CallbackOutcome::Completed)
        .filter(|e| e.verdict.decision == crate::guard::Decision::RejectForeign)
        .map(|e| {
            format!(
                "{} bound {:?} despite a foreign Referer",
                e.endpoint, e.subject
            )
        })
        .collect()
}

fn implicit_tokens_are_grants(input: &InvariantInput) -> Vec<String> {
    let mut out = Vec::new();
    for (id, idp) in &input.world.idps {
        for g in idp.grants() {
            if g.grant_kind == GrantKind::AccessToken
                && !idp.tokens().iter().any(|t| t.value == g.value)
            {
                out.push(format!(
                    "{id}: implicit grant {} not honoured as a token",
                    g.value
                ));
            }
        }
    }
    out
}

pub fn check_invariants(input: &InvariantInput) -> Vec<Assertion> {
    vec![
        assertion("single-use codes", single_use_codes(input)),
        assertion("grant binding", grant_binding(input)),
        assertion(
            "implicit tokens trace to grants",
            implicit_tokens_are_grants(input),
        ),
        assertion("consent precedes grant", consent_precedes_grant(input)),
        assertion("fragment never on the wire", fragment_never_on_wire(input)),
        assertion("cookie isolation", cookie_isolation(input)),
        assertion("referer unforgeability", referer_unforgeable(input)),
        assertion("downgrade strips referer", downgrade_strips_referer(input)),
        assertion(
            "session binding soundness",
            session_binding_soundness(input),
        ),
    ]
}
