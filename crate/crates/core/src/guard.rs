//! Referer-based CSRF guard for OAuth 2.0 / OpenID Connect callback endpoints.
//!
//! A genuine authorization response reaches the RP because the user agent was
//! sent there by the IdP (consent click, so the Referer is the IdP) or by the
//! RP's own page (automatic grant, so the Referer is the RP). A forged
//! response is launched from some third page, and the browser names that page
//! in the Referer. The guard therefore accepts a callback iff the Referer
//! origin is the bound IdP's or the RP's own.
//!
//! Paths and queries are ignored; only `(scheme, host, port)` is compared, by
//! exact equality. `aidp.com.attacker.com` is not `aidp.com`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;

use crate::http::{parse_uri, Origin};
use crate::rp::{Flow, IdpBinding};

/// What to do when no origin can be read from the Referer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentMode {
    #[default]
    FailClosed,
    FailOpen,
    FlagOnly,
}

impl std::str::FromStr for AbsentMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fail-closed" | "fail_closed" => Ok(AbsentMode::FailClosed),
            "fail-open" | "fail_open" => Ok(AbsentMode::FailOpen),
            "flag-only" | "flag_only" => Ok(AbsentMode::FlagOnly),
            other => Err(format!("unknown absent mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefererPolicy {
    expected: BTreeSet<Origin>,
    pub absent_mode: AbsentMode,
    /// When false, `http://aidp.com` matches an expected `https://aidp.com`.
    pub compare_scheme: bool,
}

impl RefererPolicy {
    /// Policy for an authorization response delivered by redirect: the IdP
    /// or the RP itself may have initiated the navigation.
    pub fn new(idp_origin: Origin, rp_origin: Origin, absent_mode: AbsentMode) -> Self {
        Self::from_expected([idp_origin, rp_origin], absent_mode)
    }

    pub fn from_expected(
        expected: impl IntoIterator<Item = Origin>,
        absent_mode: AbsentMode,
    ) -> Self {
        RefererPolicy {
            expected: expected.into_iter().collect(),
            absent_mode,
            compare_scheme: true,
        }
    }

    pub fn with_compare_scheme(mut self, compare_scheme: bool) -> Self {
        self.compare_scheme = compare_scheme;
        self
    }

    pub fn expected(&self) -> &BTreeSet<Origin> {
        &self.expected
    }

    fn admits(&self, observed: &Origin) -> bool {
        if self.compare_scheme {
            return self.expected.contains(observed);
        }
        let key = |o: &Origin| {
            let port = (o.port != o.scheme.default_port()).then_some(o.port);
            (o.host.clone(), port)
        };
        let observed = key(observed);
        self.expected.iter().any(|o| key(o) == observed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    RejectForeign,
    IndeterminateAbsent,
    IndeterminateMalformed,
}

impl Decision {
    pub fn is_indeterminate(self) -> bool {
        matches!(
            self,
            Decision::IndeterminateAbsent | Decision::IndeterminateMalformed
        )
    }
}

/// How the RP should treat a verdict once its absent-mode is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Accept,
    AcceptFlagged,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefererVerdict {
    pub decision: Decision,
    pub observed: Option<Origin>,
    pub expected: Vec<Origin>,
}

impl RefererVerdict {
    pub fn disposition(&self, mode: AbsentMode) -> Disposition {
        match self.decision {
            Decision::Accept => Disposition::Accept,
            Decision::RejectForeign => Disposition::Reject,
            Decision::IndeterminateAbsent | Decision::IndeterminateMalformed => match mode {
                AbsentMode::FailClosed => Disposition::Reject,
                AbsentMode::FailOpen => Disposition::Accept,
                AbsentMode::FlagOnly => Disposition::AcceptFlagged,
            },
        }
    }
}

/// Decides a callback request from its `Referer` header. Total: every input,
/// however mangled, maps to one of the four decisions.
pub fn evaluate(referer_header: Option<&str>, policy: &RefererPolicy) -> RefererVerdict {
    let expected: Vec<Origin> = policy.expected.iter().cloned().collect();
    let Some(raw) = referer_header else {
        return RefererVerdict {
            decision: Decision::IndeterminateAbsent,
            observed: None,
            expected,
        };
    };
    let observed = match parse_uri(raw) {
        Ok(uri) => uri.origin(),
        Err(_) => {
            return RefererVerdict {
                decision: Decision::IndeterminateMalformed,
                observed: None,
                expected,
            }
        }
    };
    let decision = if policy.admits(&observed) {
        Decision::Accept
    } else {
        Decision::RejectForeign
    };
    RefererVerdict {
        decision,
        observed: Some(observed),
        expected,
    }
}

/// Origins a callback for `binding` may legitimately be initiated from.
///
/// Redirect-delivered responses (code and implicit flows) come from the IdP's
/// consent page or, under automatic granting, from the RP page the user
/// clicked. Client-library responses reach the RP by XHR from its own page,
/// so only the RP is acceptable.
pub fn expected_origins(binding: &IdpBinding, request_host: &Origin) -> BTreeSet<Origin> {
    let mut set = BTreeSet::new();
    set.insert(request_host.clone());
    match binding.flow {
        Flow::Code | Flow::Implicit => {
            set.insert(binding.idp_origin.clone());
        }
        Flow::ClientLibrary => {}
    }
    set
}

/// `state` check: both values present and equal, compared in constant time.
pub fn evaluate_state(presented: Option<&str>, pending: Option<&str>) -> bool {
    match (presented, pending) {
        (Some(p), Some(q)) => bool::from(p.as_bytes().ct_eq(q.as_bytes())),
        _ => false,
    }
}
