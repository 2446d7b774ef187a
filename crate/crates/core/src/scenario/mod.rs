//! Scripted multi-actor scenarios: a world, a script of browser actions,
//! and the outcome the script is expected to produce.

mod catalog;
mod invariants;
mod listing;
mod world;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use catalog::{builtin_catalog, catalog_for, find, primary_ids, variant_ids};
pub use invariants::{check_invariants, InvariantInput};
pub use listing::{referer_line, render_listing, render_request, ELIDED};
pub use world::{
    ActorSpec, AttackerSite, HarnessError, RecordingRouter, Vector, World, WorldConfig, ATTACKER,
    BAIT, VICTIM,
};

use crate::browser::{Browser, NavigationTrace};
use crate::guard::Decision;
use crate::http::{HttpExchange, Origin, Uri};
use crate::rp::{CallbackOutcome, DefenceConfig, RpEvent, LOGIN_PATH, TOKEN_DELIVERY_PATH};

/// Somewhere an actor can type into the address bar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Place {
    RpHome,
    AttackerPage,
    /// The login page of the actor's own IdP.
    IdpLogin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum Step {
    Visit {
        actor: String,
        place: Place,
    },
    /// Performs the labelled action on the actor's current page.
    Click {
        actor: String,
        label: String,
    },
    /// Fills the current login form with the actor's credentials and
    /// submits it.
    SubmitLogin {
        actor: String,
    },
    /// Performs the labelled action but stops before anything reaches the
    /// RP, keeping the authorization response for later.
    Capture {
        actor: String,
        label: String,
    },
    /// Puts the most recently captured response on the attacker's page.
    Publish {
        actor: String,
        vector: Vector,
    },
}

impl Step {
    pub fn actor(&self) -> &str {
        match self {
            Step::Visit { actor, .. }
            | Step::Click { actor, .. }
            | Step::SubmitLogin { actor }
            | Step::Capture { actor, .. }
            | Step::Publish { actor, .. } => actor,
        }
    }

    fn describe(&self) -> String {
        match self {
            Step::Visit { actor, place } => format!("{actor} visits {place:?}"),
            Step::Click { actor, label } => format!("{actor} clicks {label}"),
            Step::SubmitLogin { actor } => format!("{actor} submits IdP login"),
            Step::Capture { actor, label } => {
                format!("{actor} clicks {label} and aborts before the RP")
            }
            Step::Publish { actor, vector } => {
                format!("{actor} publishes the response as {vector:?}")
            }
        }
    }
}

fn visit(actor: &str, place: Place) -> Step {
    Step::Visit {
        actor: actor.into(),
        place,
    }
}

fn click(actor: &str, label: &str) -> Step {
    Step::Click {
        actor: actor.into(),
        label: label.into(),
    }
}

fn submit_login(actor: &str) -> Step {
    Step::SubmitLogin {
        actor: actor.into(),
    }
}

fn capture(actor: &str, label: &str) -> Step {
    Step::Capture {
        actor: actor.into(),
        label: label.into(),
    }
}

fn publish(actor: &str, vector: Vector) -> Step {
    Step::Publish {
        actor: actor.into(),
        vector,
    }
}

/// RP callback events one step is expected to produce, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedVerdict {
    pub step: usize,
    pub events: Vec<ExpectedEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedEvent {
    pub decision: Decision,
    pub outcome: CallbackOutcome,
    #[serde(default)]
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedOutcome {
    pub final_verdicts: Vec<ExpectedVerdict>,
    pub victim_bound_subject: Option<String>,
    pub attack_succeeded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub description: String,
    /// True when the script contains an attack.
    pub attack: bool,
    pub world: WorldConfig,
    pub script: Vec<Step>,
    pub expected: ExpectedOutcome,
}

impl Scenario {
    pub fn with_defences(mut self, defences: DefenceConfig) -> Self {
        self.world.rp.defences = defences;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Assertion {
    fn check<T: PartialEq + std::fmt::Debug>(name: &str, expected: T, actual: T) -> Self {
        Assertion {
            name: name.to_string(),
            passed: expected == actual,
            detail: format!("expected {expected:?}, got {actual:?}"),
        }
    }
}

/// One RP event with the step that caused it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub step: usize,
    #[serde(flatten)]
    pub event: RpEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepRecord {
    pub index: usize,
    pub actor: String,
    pub description: String,
    pub trace: Option<NavigationTrace>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Listing {
    pub step: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScenarioReport {
    pub id: String,
    pub description: String,
    pub seed: u64,
    pub defences: DefenceConfig,
    pub passed: bool,
    pub assertions: Vec<Assertion>,
    pub verdicts: Vec<VerdictRecord>,
    pub victim_bound_subject: Option<String>,
    pub attack_succeeded: bool,
    pub tokens_issued: usize,
    pub listings: Vec<Listing>,
    pub steps: Vec<StepRecord>,
}

impl ScenarioReport {
    /// Callback requests the given step sent to the RP.
    pub fn callback_listings(&self, step: usize) -> Vec<&str> {
        self.listings
            .iter()
            .filter(|l| l.step == step)
            .map(|l| l.text.as_str())
            .collect()
    }

    pub fn failed_assertions(&self) -> Vec<&Assertion> {
        self.assertions.iter().filter(|a| !a.passed).collect()
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "== {} [{}] {}\n",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.description
        );
        out.push_str(&format!(
            "defences: referer_guard={} state_check={} custom_header_check={} absent_mode={:?}\n",
            self.defences.referer_guard,
            self.defences.state_check,
            self.defences.custom_header_check,
            self.defences.absent_referer_mode
        ));
        out.push_str(&format!(
            "victim bound subject: {}; attack succeeded: {}; tokens issued: {}\n",
            self.victim_bound_subject.as_deref().unwrap_or("-"),
            self.attack_succeeded,
            self.tokens_issued
        ));
        for v in &self.verdicts {
            let observed = v
                .event
                .verdict
                .observed
                .as_ref()
                .map(Origin::to_string)
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "step {} {} idp={} referer={} decision={:?} enforced={} outcome={:?}{}\n",
                v.step,
                v.event.endpoint,
                v.event.idp.as_deref().unwrap_or("-"),
                observed,
                v.event.verdict.decision,
                v.event.guard_enforced,
                v.event.outcome,
                if v.event.flagged { " FLAGGED" } else { "" }
            ));
        }
        for a in &self.assertions {
            out.push_str(&format!(
                "  [{}] {}: {}\n",
                if a.passed { "ok" } else { "FAIL" },
                a.name,
                a.detail
            ));
        }
        for l in &self.listings {
            out.push_str(&format!("-- listing (step {})\n{}", l.step, l.text));
        }
        out
    }
}

struct Runner<'w> {
    world: &'w World,
    browsers: BTreeMap<String, Browser>,
    captures: BTreeMap<String, Uri>,
}

impl Runner<'_> {
    fn place_url(&self, actor: &str, place: Place) -> Uri {
        let cfg = &self.world.config;
        match place {
            Place::RpHome => cfg.rp.origin.root(),
            Place::AttackerPage => cfg.attacker_origin.root(),
            Place::IdpLogin => {
                let idp = cfg.actor(actor).map(|a| a.idp.as_str()).unwrap_or_default();
                let idp = &self.world.idps[idp];
                idp.config().endpoint(&idp.config().endpoints.login)
            }
        }
    }

    fn run_step(&mut self, step: &Step) -> Result<Option<NavigationTrace>, String> {
        let router = &self.world.front;
        let actor = step.actor().to_string();
        let spec = self.world.config.actor(&actor).cloned();
        match step {
            Step::Visit { place, .. } => {
                let url = self.place_url(&actor, *place);
                let browser = self.browser(&actor);
                browser
                    .open(&url, router)
                    .map(Some)
                    .map_err(|e| e.to_string())
            }
            Step::Click { label, .. } => self
                .browser(&actor)
                .perform(label, &[], router, None)
                .map(Some)
                .map_err(|e| e.to_string()),
            Step::SubmitLogin { .. } => {
                let spec = spec.ok_or("actor has no credentials")?;
                let fields = vec![
                    ("username".to_string(), spec.username),
                    ("password".to_string(), spec.password),
                ];
                self.browser(&actor)
                    .perform("login", &fields, router, None)
                    .map(Some)
                    .map_err(|e| e.to_string())
            }
            Step::Capture { label, .. } => {
                let rp = self.world.config.rp.origin.clone();
                let trace = self
                    .browser(&actor)
                    .perform(label, &[], router, Some(&rp))
                    .map_err(|e| e.to_string())?;
                match &trace.aborted_before {
                    Some(uri) => {
                        self.captures.insert(actor, uri.clone());
                        Ok(Some(trace))
                    }
                    None => Err("flow never redirected to the RP; nothing captured".into()),
                }
            }
            Step::Publish { vector, .. } => {
                let target = self
                    .captures
                    .get(&actor)
                    .cloned()
                    .ok_or("nothing captured to publish")?;
                self.world.attacker.publish(*vector, target);
                Ok(None)
            }
        }
    }

    fn browser(&mut self, actor: &str) -> &mut Browser {
        self.browsers
            .entry(actor.to_string())
            .or_insert_with(|| Browser::new(actor))
    }
}

fn is_rp_callback(world: &World, ex: &HttpExchange) -> bool {
    let uri = ex.request.uri();
    if uri.origin() != world.config.rp.origin {
        return false;
    }
    let path = uri.path();
    path == TOKEN_DELIVERY_PATH
        || world
            .config
            .rp
            .bindings
            .iter()
            .any(|b| b.resolution.path() == path)
}

/// Runs `scenario` in a fresh world built with `seed`. Setup problems
/// (undefined actors, a world that cannot be built) are errors; everything
/// that goes wrong after that is reported as a failed assertion.
pub fn run_scenario(scenario: &Scenario, seed: u64) -> Result<ScenarioReport, HarnessError> {
    for (i, step) in scenario.script.iter().enumerate() {
        if scenario.world.actor(step.actor()).is_none() {
            return Err(HarnessError::UndefinedActor {
                step: i,
                actor: step.actor().to_string(),
            });
        }
    }
    let world = World::build(&scenario.world, seed)?;
    let mut runner = Runner {
        world: &world,
        browsers: BTreeMap::new(),
        captures: BTreeMap::new(),
    };

    let mut steps = Vec::new();
    let mut verdicts = Vec::new();
    let mut listings = Vec::new();
    for (index, step) in scenario.script.iter().enumerate() {
        let seen = world.rp.events().len();
        let result = runner.run_step(step);
        for event in world.rp.events().into_iter().skip(seen) {
            verdicts.push(VerdictRecord { step: index, event });
        }
        let (trace, error) = match result {
            Ok(t) => (t, None),
            Err(e) => (None, Some(e)),
        };
        if let Some(t) = &trace {
            for ex in t.exchanges.iter().filter(|ex| is_rp_callback(&world, ex)) {
                listings.push(Listing {
                    step: index,
                    text: render_listing(ex),
                });
            }
        }
        steps.push(StepRecord {
            index,
            actor: step.actor().to_string(),
            description: step.describe(),
            trace,
            error,
        });
    }

    let victim_session = runner
        .browsers
        .get(VICTIM)
        .and_then(|b| {
            b.jar().get(
                world.config.rp.origin.host.as_str(),
                crate::rp::SESSION_COOKIE,
            )
        })
        .map(str::to_string);
    let victim_bound_subject = victim_session
        .and_then(|sid| world.rp.session(&sid))
        .and_then(|s| s.logged_in_subject)
        .map(|b| b.subject);
    let attacker_subject = world.config.actor(ATTACKER).map(|a| a.username.clone());
    let attack_succeeded =
        victim_bound_subject.is_some() && victim_bound_subject == attacker_subject;

    let mut assertions = Vec::new();
    for s in &steps {
        assertions.push(Assertion {
            name: format!("step {} runs", s.index),
            passed: s.error.is_none(),
            detail: s.error.clone().unwrap_or_else(|| s.description.clone()),
        });
    }
    for ev in &scenario.expected.final_verdicts {
        let actual: Vec<ExpectedEvent> = verdicts
            .iter()
            .filter(|v| v.step == ev.step)
            .map(|v| ExpectedEvent {
                decision: v.event.verdict.decision,
                outcome: v.event.outcome,
                flagged: v.event.flagged,
            })
            .collect();
        assertions.push(Assertion::check(
            &format!("step {} callback verdicts", ev.step),
            ev.events.clone(),
            actual,
        ));
    }
    assertions.push(Assertion::check(
        "victim bound subject",
        scenario.expected.victim_bound_subject.clone(),
        victim_bound_subject.clone(),
    ));
    assertions.push(Assertion::check(
        "attack succeeded",
        scenario.expected.attack_succeeded,
        attack_succeeded,
    ));

    let traces: Vec<(&str, &NavigationTrace)> = steps
        .iter()
        .filter_map(|s| s.trace.as_ref().map(|t| (s.actor.as_str(), t)))
        .collect();
    assertions.extend(check_invariants(&InvariantInput {
        world: &world,
        traces: &traces,
        browsers: &runner.browsers,
    }));

    let passed = assertions.iter().all(|a| a.passed);
    Ok(ScenarioReport {
        id: scenario.id.clone(),
        description: scenario.description.clone(),
        seed,
        defences: scenario.world.rp.defences,
        passed,
        assertions,
        verdicts,
        victim_bound_subject,
        attack_succeeded,
        tokens_issued: world.tokens_issued(),
        listings,
        steps,
    })
}

/// Runs every scenario, optionally on one thread each. Reports come back in
/// input order either way.
pub fn run_all(
    scenarios: &[Scenario],
    seed: u64,
    parallel: bool,
) -> Vec<Result<ScenarioReport, HarnessError>> {
    if !parallel {
        return scenarios.iter().map(|s| run_scenario(s, seed)).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = scenarios
            .iter()
            .map(|s| scope.spawn(move || run_scenario(s, seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scenario thread panicked"))
            .collect()
    })
}

pub(crate) fn login_label(idp: &str) -> String {
    format!("{}:{idp}", &LOGIN_PATH[1..])
}
