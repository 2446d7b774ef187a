//! Built-in scenarios.
//!
//! S1-S10 are the primary set. Variants reuse a primary script with a
//! different defence configuration: `S3'`, `S5'` and `S6'` run the attacks
//! with every defence off, and `S8-flag-only` / `S8-fail-open` replay the
//! plain-http RP under the other absent-Referer modes.

use super::world::{Vector, WorldConfig, ATTACKER, BAIT, VICTIM};
use super::{
    capture, click, login_label, publish, submit_login, visit, ExpectedEvent, ExpectedOutcome,
    ExpectedVerdict, Place, Scenario, Step,
};
use crate::guard::{AbsentMode, Decision};
use crate::http::Scheme;
use crate::rp::{CallbackOutcome, DefenceConfig, Flow, Resolution};

pub const SHARED_CALLBACK: &str = "/oauth2-callback";

const PRIMARY: [&str; 10] = ["S1", "S2", "S3", "S4", "S5", "S6", "S7", "S8", "S9", "S10"];
const VARIANTS: [&str; 5] = ["S3'", "S5'", "S6'", "S8-flag-only", "S8-fail-open"];

pub fn primary_ids() -> Vec<&'static str> {
    PRIMARY.to_vec()
}

pub fn variant_ids() -> Vec<&'static str> {
    VARIANTS.to_vec()
}

fn ev(decision: Decision, outcome: CallbackOutcome) -> ExpectedEvent {
    ExpectedEvent {
        decision,
        outcome,
        flagged: false,
    }
}

fn expect(
    step: usize,
    events: Vec<ExpectedEvent>,
    bound: Option<&str>,
    attack: bool,
) -> ExpectedOutcome {
    ExpectedOutcome {
        final_verdicts: vec![ExpectedVerdict { step, events }],
        victim_bound_subject: bound.map(str::to_string),
        attack_succeeded: attack,
    }
}

struct Ctx {
    base: WorldConfig,
    idp: String,
    victim: String,
    attacker: String,
}

impl Ctx {
    fn new(base: &WorldConfig) -> Self {
        let name = |actor: &str| {
            base.actor(actor)
                .map(|a| a.username.clone())
                .unwrap_or_default()
        };
        Ctx {
            idp: base.primary_idp(),
            victim: name(VICTIM),
            attacker: name(ATTACKER),
            base: base.clone(),
        }
    }

    fn login(&self) -> String {
        login_label(&self.idp)
    }

    fn world(&self, auto_grant: bool, defences: DefenceConfig) -> WorldConfig {
        let mut w = self.base.clone();
        if let Some(i) = w.idp_mut(&self.idp) {
            i.auto_grant = auto_grant;
        }
        w.rp.defences = defences;
        w
    }

    fn with_flow(&self, mut w: WorldConfig, flow: Flow) -> WorldConfig {
        if let Some(b) = w.binding_mut(&self.idp) {
            b.flow = flow;
        }
        w
    }

    fn shared(&self, mut w: WorldConfig) -> WorldConfig {
        for b in &mut w.rp.bindings {
            b.resolution = Resolution::SharedCallback(SHARED_CALLBACK.into());
        }
        w
    }

    /// Victim signs in through the consent page. The grant click is step 3.
    fn consent_login(&self) -> Vec<Step> {
        vec![
            visit(VICTIM, Place::RpHome),
            click(VICTIM, &self.login()),
            submit_login(VICTIM),
            click(VICTIM, "grant"),
        ]
    }

    /// Victim is already signed in at the IdP, which grants automatically.
    /// The login click is step 3.
    fn auto_login(&self) -> Vec<Step> {
        vec![
            visit(VICTIM, Place::IdpLogin),
            submit_login(VICTIM),
            visit(VICTIM, Place::RpHome),
            click(VICTIM, &self.login()),
        ]
    }

    /// Attacker walks the flow with their own account at an auto-granting
    /// IdP, stops before the RP, and publishes the response. Five steps.
    fn attacker_prepares(&self, vector: Vector) -> Vec<Step> {
        vec![
            visit(ATTACKER, Place::IdpLogin),
            submit_login(ATTACKER),
            visit(ATTACKER, Place::RpHome),
            capture(ATTACKER, &self.login()),
            publish(ATTACKER, vector),
        ]
    }

    /// Victim with a plain RP session falls for the bait. The bait is the
    /// third step.
    fn victim_takes_bait(&self) -> Vec<Step> {
        vec![
            visit(VICTIM, Place::RpHome),
            visit(VICTIM, Place::AttackerPage),
            click(VICTIM, BAIT),
        ]
    }

    fn s1(&self) -> Scenario {
        Scenario {
            id: "S1".into(),
            description: "code flow with consent page, guard on".into(),
            attack: false,
            world: self.world(false, DefenceConfig::default()),
            script: self.consent_login(),
            expected: expect(
                3,
                vec![ev(Decision::Accept, CallbackOutcome::Completed)],
                Some(&self.victim),
                false,
            ),
        }
    }

    fn s2(&self) -> Scenario {
        Scenario {
            id: "S2".into(),
            description: "code flow with automatic authorization granting, guard on".into(),
            attack: false,
            world: self.world(true, DefenceConfig::default()),
            script: self.auto_login(),
            expected: expect(
                3,
                vec![ev(Decision::Accept, CallbackOutcome::Completed)],
                Some(&self.victim),
                false,
            ),
        }
    }

    fn code_csrf(
        &self,
        id: &str,
        description: &str,
        defences: DefenceConfig,
        outcome: CallbackOutcome,
    ) -> Scenario {
        let mut script = self.attacker_prepares(Vector::Link);
        script.extend(self.victim_takes_bait());
        let success = outcome == CallbackOutcome::Completed;
        Scenario {
            id: id.into(),
            description: description.into(),
            attack: true,
            world: self.world(true, defences),
            script,
            expected: expect(
                7,
                vec![ev(Decision::RejectForeign, outcome)],
                success.then_some(self.attacker.as_str()),
                success,
            ),
        }
    }

    fn s4(&self) -> Scenario {
        Scenario {
            id: "S4".into(),
            description: "implicit flow with consent page, guard on".into(),
            attack: false,
            world: self.with_flow(self.world(false, DefenceConfig::default()), Flow::Implicit),
            script: self.consent_login(),
            expected: expect(
                3,
                vec![
                    ev(Decision::Accept, CallbackOutcome::ExtractorServed),
                    ev(Decision::Accept, CallbackOutcome::Completed),
                ],
                Some(&self.victim),
                false,
            ),
        }
    }

    fn implicit_csrf(&self, id: &str, description: &str, defences: DefenceConfig) -> Scenario {
        let mut script = self.attacker_prepares(Vector::Link);
        script.extend(self.victim_takes_bait());
        let (events, bound, success) = if defences.referer_guard {
            (
                vec![ev(Decision::RejectForeign, CallbackOutcome::CsrfRejected)],
                None,
                false,
            )
        } else {
            (
                vec![
                    ev(Decision::RejectForeign, CallbackOutcome::ExtractorServed),
                    // The delivery leg comes from the RP's own extractor page.
                    ev(Decision::Accept, CallbackOutcome::Completed),
                ],
                Some(self.attacker.as_str()),
                true,
            )
        };
        Scenario {
            id: id.into(),
            description: description.into(),
            attack: true,
            world: self.with_flow(self.world(true, defences), Flow::Implicit),
            script,
            expected: expect(7, events, bound, success),
        }
    }

    fn shared_csrf(&self, id: &str, description: &str, defences: DefenceConfig) -> Scenario {
        let mut script = vec![
            visit(ATTACKER, Place::IdpLogin),
            submit_login(ATTACKER),
            visit(ATTACKER, Place::RpHome),
            click(ATTACKER, &self.login()),
            capture(ATTACKER, "grant"),
            publish(ATTACKER, Vector::Image),
        ];
        // Legitimate login first (step 9), then a second login attempt left
        // at the consent page so the session records the intention.
        script.extend(self.consent_login());
        script.extend([
            click(VICTIM, &self.login()),
            visit(VICTIM, Place::AttackerPage),
            click(VICTIM, BAIT),
        ]);
        let (outcome, bound, success) = if defences.referer_guard {
            (CallbackOutcome::CsrfRejected, &self.victim, false)
        } else {
            (CallbackOutcome::Completed, &self.attacker, true)
        };
        Scenario {
            id: id.into(),
            description: description.into(),
            attack: true,
            world: self.shared(self.world(false, defences)),
            script,
            expected: ExpectedOutcome {
                final_verdicts: vec![
                    ExpectedVerdict {
                        step: 9,
                        events: vec![ev(Decision::Accept, CallbackOutcome::Completed)],
                    },
                    ExpectedVerdict {
                        step: 12,
                        events: vec![ev(Decision::RejectForeign, outcome)],
                    },
                ],
                victim_bound_subject: Some(bound.clone()),
                attack_succeeded: success,
            },
        }
    }

    fn s7(&self) -> Scenario {
        let defences = DefenceConfig {
            custom_header_check: true,
            ..DefenceConfig::default()
        };
        Scenario {
            id: "S7".into(),
            description: "client-library delivery by XHR, guard and custom header on".into(),
            attack: false,
            world: self.with_flow(self.world(true, defences), Flow::ClientLibrary),
            script: self.auto_login(),
            expected: expect(
                3,
                vec![ev(Decision::Accept, CallbackOutcome::Completed)],
                Some(&self.victim),
                false,
            ),
        }
    }

    fn http_rp(&self, id: &str, mode: AbsentMode) -> Scenario {
        let mut world = self.world(
            false,
            DefenceConfig {
                absent_referer_mode: mode,
                ..DefenceConfig::default()
            },
        );
        world.rp.origin.scheme = Scheme::Http;
        world.rp.origin.port = Scheme::Http.default_port();
        let (outcome, bound) = match mode {
            AbsentMode::FailClosed => (CallbackOutcome::AbsentRejected, None),
            AbsentMode::FailOpen | AbsentMode::FlagOnly => {
                (CallbackOutcome::Completed, Some(self.victim.as_str()))
            }
        };
        Scenario {
            id: id.into(),
            description: format!(
                "RP registered an http redirect_uri; the browser drops the Referer ({mode:?})"
            ),
            attack: false,
            world,
            script: self.consent_login(),
            expected: expect(
                3,
                vec![ExpectedEvent {
                    decision: Decision::IndeterminateAbsent,
                    outcome,
                    flagged: mode == AbsentMode::FlagOnly,
                }],
                bound,
                false,
            ),
        }
    }

    fn s10(&self) -> Scenario {
        let mut script = self.attacker_prepares(Vector::Link);
        script.extend(self.victim_takes_bait());
        Scenario {
            id: "S10".into(),
            description: "forged response at a shared callback with no login in progress".into(),
            attack: true,
            world: self.shared(self.world(true, DefenceConfig::default())),
            script,
            expected: expect(
                7,
                vec![ev(Decision::RejectForeign, CallbackOutcome::NoIntention)],
                None,
                false,
            ),
        }
    }
}

/// The full catalog (primary scenarios, then variants) built on `base`.
pub fn catalog_for(base: &WorldConfig) -> Vec<Scenario> {
    let c = Ctx::new(base);
    let guard = DefenceConfig::default();
    let none = DefenceConfig::none();
    let state_only = DefenceConfig {
        referer_guard: false,
        state_check: true,
        ..DefenceConfig::default()
    };
    vec![
        c.s1(),
        c.s2(),
        c.code_csrf(
            "S3",
            "code-flow CSRF via attacker link, guard on",
            guard,
            CallbackOutcome::CsrfRejected,
        ),
        c.s4(),
        c.implicit_csrf(
            "S5",
            "implicit-flow CSRF via crafted fragment link, guard on",
            guard,
        ),
        c.shared_csrf(
            "S6",
            "CSRF against a shared callback with intention tracking, guard on",
            guard,
        ),
        c.s7(),
        c.http_rp("S8", AbsentMode::FailClosed),
        c.code_csrf(
            "S9",
            "code-flow CSRF against the state parameter alone, guard off",
            state_only,
            CallbackOutcome::StateMismatch,
        ),
        c.s10(),
        c.code_csrf(
            "S3'",
            "code-flow CSRF via attacker link, no defences",
            none,
            CallbackOutcome::Completed,
        ),
        c.implicit_csrf(
            "S5'",
            "implicit-flow CSRF via crafted fragment link, no defences",
            none,
        ),
        c.shared_csrf("S6'", "CSRF against a shared callback, no defences", none),
        c.http_rp("S8-flag-only", AbsentMode::FlagOnly),
        c.http_rp("S8-fail-open", AbsentMode::FailOpen),
    ]
}

pub fn builtin_catalog() -> Vec<Scenario> {
    catalog_for(&WorldConfig::default())
}

pub fn find(id: &str) -> Option<Scenario> {
    builtin_catalog().into_iter().find(|s| s.id == id)
}
