//! Versioned prompt templates shipped in `templates/`.
//!
//! Placeholders are written `{{name}}`. A template's id doubles as the
//! script key of requests rendered from it, so scripted backends can route
//! on it.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub id: &'static str,
    pub body: &'static str,
}

macro_rules! template {
    ($name:ident, $id:literal, $file:literal) => {
        pub const $name: Template = Template { id: $id, body: include_str!(concat!("../../templates/", $file)) };
    };
}

template!(FILTER_ITEM_TOPICS, "filter_item_topics.v1", "filter_item_topics.v1.txt");
template!(FILTER_RULE_TOPICS, "filter_rule_topics.v1", "filter_rule_topics.v1.txt");
template!(FILTER_VERDICT, "filter_verdict.v1", "filter_verdict.v1.txt");
template!(PERCEIVE, "perceive.v1", "perceive.v1.txt");
template!(PERCEIVE_GENERIC, "perceive_generic.v1", "perceive_generic.v1.txt");
template!(SUMMARY, "summary.v1", "summary.v1.txt");
template!(REFLECT_MERGE, "reflect_merge.v1", "reflect_merge.v1.txt");
template!(NEEDS_CONTEXT, "needs_context.v1", "needs_context.v1.txt");
template!(NEED_DETECTION, "need_detection.v1", "need_detection.v1.txt");
template!(RULE_RELEVANCE, "rule_relevance.v1", "rule_relevance.v1.txt");
template!(PROXY_PREDICT, "proxy_predict.v1", "proxy_predict.v1.txt");

/// Script key for the conversational agent's free-text replies.
pub const NEEDS_REPLY_KEY: &str = "needs_reply.v1";

pub const ALL: &[Template] = &[
    FILTER_ITEM_TOPICS,
    FILTER_RULE_TOPICS,
    FILTER_VERDICT,
    PERCEIVE,
    PERCEIVE_GENERIC,
    SUMMARY,
    REFLECT_MERGE,
    NEEDS_CONTEXT,
    NEED_DETECTION,
    RULE_RELEVANCE,
    PROXY_PREDICT,
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingPlaceholder {
    pub template: &'static str,
    pub name: String,
}

impl fmt::Display for MissingPlaceholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "template {} left {{{{{}}}}} unfilled", self.template, self.name)
    }
}

impl Template {
    /// Names of all placeholders, in order of first appearance.
    pub fn placeholders(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        let mut rest = self.body;
        while let Some(start) = rest.find("{{") {
            let after = &rest[start + 2..];
            let Some(end) = after.find("}}") else { break };
            let name = &after[..end];
            if !names.contains(&name) {
                names.push(name);
            }
            rest = &after[end + 2..];
        }
        names
    }

    /// Substitutes every placeholder. Values are inserted verbatim, so a value
    /// that itself contains `{{x}}` is never re-expanded.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, MissingPlaceholder> {
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body;
        while let Some(start) = rest.find("{{") {
            let after = &rest[start + 2..];
            let Some(end) = after.find("}}") else { break };
            let name = &after[..end];
            let value = values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| MissingPlaceholder { template: self.id, name: name.to_string() })?;
            out.push_str(&rest[..start]);
            out.push_str(value);
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out.trim_end().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perceive_template_has_five_bands() {
        let names = PERCEIVE.placeholders();
        for band in ["very_liked", "fairly_liked", "neutral", "fairly_disliked", "very_disliked"] {
            assert!(names.contains(&band), "{band}");
        }
        assert!(PERCEIVE.body.contains("Very liked: {{very_liked}}"));
    }

    #[test]
    fn render_fills_and_reports_missing() {
        let out = REFLECT_MERGE.render(&[("feature", "horror films"), ("feature_list", "- horror movies")]).unwrap();
        assert!(out.starts_with("Can \"horror films\" be merged with the features listed below?"));
        assert!(out.contains("{\"merge\": true|false"));
        let err = REFLECT_MERGE.render(&[("feature", "x")]).unwrap_err();
        assert_eq!(err.name, "feature_list");
    }

    #[test]
    fn values_are_not_re_expanded() {
        let out = FILTER_VERDICT.render(&[]).unwrap();
        assert!(out.starts_with("Based solely on our conversation"));
        let out =
            PERCEIVE_GENERIC.render(&[("platform", "{{title}}"), ("title", "t"), ("interaction", "have")]).unwrap();
        assert!(out.contains("on {{title}} titled \"t\""));
    }

    #[test]
    fn every_template_has_a_unique_id() {
        let mut ids: Vec<_> = ALL.iter().map(|t| t.id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), ALL.len());
    }
}
