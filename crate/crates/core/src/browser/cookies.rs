use std::collections::BTreeMap;

/// Host-keyed cookie store. A cookie is only ever sent back to the exact
/// host that set it; there is no domain matching and no `SameSite`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CookieJar {
    by_host: BTreeMap<String, BTreeMap<String, String>>,
}

impl CookieJar {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn store(&mut self, host: &str, name: &str, value: &str) {
        self.by_host
            .entry(host.to_string())
            .or_default()
            .insert(name.to_string(), value.to_string());
    }

    pub fn get(&self, host: &str, name: &str) -> Option<&str> {
        self.by_host.get(host)?.get(name).map(String::as_str)
    }

    /// `Cookie` header value for a request to `host`, if any cookies apply.
    pub fn header_for(&self, host: &str) -> Option<String> {
        let cookies = self.by_host.get(host)?;
        if cookies.is_empty() {
            return None;
        }
        Some(
            cookies
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join("; "),
        )
    }

    pub fn hosts(&self) -> impl Iterator<Item = &str> {
        self.by_host.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cookies_stay_on_their_host() {
        let mut jar = CookieJar::new();
        jar.store("rp.com", "Jsession", "1");
        jar.store("aidp.com", "idp_session", "2");
        assert_eq!(jar.header_for("rp.com").as_deref(), Some("Jsession=1"));
        assert_eq!(jar.header_for("aidp.com").as_deref(), Some("idp_session=2"));
        assert_eq!(jar.header_for("www.rp.com"), None);
        assert_eq!(jar.header_for("attacker.com"), None);
    }

    #[test]
    fn later_value_overwrites() {
        let mut jar = CookieJar::new();
        jar.store("rp.com", "a", "1");
        jar.store("rp.com", "b", "2");
        jar.store("rp.com", "a", "3");
        assert_eq!(jar.header_for("rp.com").as_deref(), Some("a=3; b=2"));
    }
}
