//! Standard and expression-perturbed prompt rendering.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Expression, QaItem};

pub const DEFAULT_STANDARD_TEMPLATE: &str = "Question: {question}\nAnswer:";
pub const DEFAULT_EXPRESSION_TEMPLATE: &str = "Question: {question}\nAnswer: {expression}";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("question for item `{0}` is empty")]
    EmptyQuestion(String),
    #[error("template is missing the `{0}` placeholder")]
    MissingPlaceholder(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRendering {
    pub text: String,
    pub expression_id: Option<String>,
    pub question_id: String,
}

/// Prompt templates with `{question}` and `{expression}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    pub standard_template: String,
    pub expression_template: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            standard_template: DEFAULT_STANDARD_TEMPLATE.to_owned(),
            expression_template: DEFAULT_EXPRESSION_TEMPLATE.to_owned(),
        }
    }
}

impl PromptTemplates {
    pub fn validate(&self) -> Result<(), PromptError> {
        if !self.standard_template.contains("{question}") || !self.expression_template.contains("{question}") {
            return Err(PromptError::MissingPlaceholder("{question}"));
        }
        if !self.expression_template.contains("{expression}") {
            return Err(PromptError::MissingPlaceholder("{expression}"));
        }
        Ok(())
    }

    pub fn render_standard(&self, item: &QaItem) -> Result<PromptRendering, PromptError> {
        check_question(item)?;
        Ok(PromptRendering {
            text: self.standard_template.replace("{question}", &item.question),
            expression_id: None,
            question_id: item.id.clone(),
        })
    }

    pub fn render_expression(&self, item: &QaItem, exp: &Expression) -> Result<PromptRendering, PromptError> {
        check_question(item)?;
        // Substitute the expression first so a question containing the
        // literal "{expression}" is left untouched.
        let text = self
            .expression_template
            .replace("{expression}", &exp.text)
            .replace("{question}", &item.question);
        Ok(PromptRendering {
            text,
            expression_id: Some(exp.id.clone()),
            question_id: item.id.clone(),
        })
    }
}

fn check_question(item: &QaItem) -> Result<(), PromptError> {
    if item.question.trim().is_empty() {
        Err(PromptError::EmptyQuestion(item.id.clone()))
    } else {
        Ok(())
    }
}

/// Renders with the default templates.
pub fn render_standard(item: &QaItem) -> Result<PromptRendering, PromptError> {
    PromptTemplates::default().render_standard(item)
}

/// Renders with the default templates.
pub fn render_expression(item: &QaItem, exp: &Expression) -> Result<PromptRendering, PromptError> {
    PromptTemplates::default().render_expression(item, exp)
}

/// Full answer text for an expression response: the prefix the model was
/// conditioned on followed by its continuation.
pub fn join_expression_answer(expression_text: &str, continuation: &str) -> String {
    let cont = continuation.trim_end();
    if cont.trim().is_empty() {
        return expression_text.trim().to_owned();
    }
    if cont.starts_with(char::is_whitespace) {
        format!("{}{}", expression_text.trim_end(), cont)
    } else {
        format!("{} {}", expression_text.trim_end(), cont)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_expression, QaSource};
    use proptest::prelude::*;

    fn item(q: &str) -> QaItem {
        QaItem::new("q1", q, vec!["x".into()], QaSource::Synthetic)
    }

    #[test]
    fn standard_prompt() {
        let r = render_standard(&item("Who wrote Hamlet?")).unwrap();
        assert_eq!(r.text, "Question: Who wrote Hamlet?\nAnswer:");
        assert_eq!(r.expression_id, None);
        assert_eq!(r.question_id, "q1");
    }

    #[test]
    fn expression_prompt() {
        let unsure = builtin_expression("unsure").unwrap();
        let r = render_expression(&item("Who wrote Hamlet?"), &unsure).unwrap();
        assert_eq!(r.text, "Question: Who wrote Hamlet?\nAnswer: I am not sure but it could be");
        assert_eq!(r.expression_id.as_deref(), Some("unsure"));

        let mustbe = builtin_expression("mustbe").unwrap();
        assert!(render_expression(&item("Q"), &mustbe).unwrap().text.ends_with("It must be"));
    }

    #[test]
    fn empty_question_rejected() {
        assert_eq!(render_standard(&item("")), Err(PromptError::EmptyQuestion("q1".into())));
        let e = builtin_expression("mustbe").unwrap();
        assert_eq!(render_expression(&item("  "), &e), Err(PromptError::EmptyQuestion("q1".into())));
    }

    #[test]
    fn custom_templates() {
        let t = PromptTemplates {
            standard_template: "Question:{question}. Answer:".into(),
            expression_template: "Question:{question}. Answer:{expression}".into(),
        };
        t.validate().unwrap();
        let e = builtin_expression("mustbe").unwrap();
        assert_eq!(t.render_expression(&item("Q?"), &e).unwrap().text, "Question:Q?. Answer:It must be");
        let bad = PromptTemplates {
            expression_template: "Question: {question}".into(),
            ..PromptTemplates::default()
        };
        assert_eq!(bad.validate(), Err(PromptError::MissingPlaceholder("{expression}")));
    }

    #[test]
    fn expression_answer_join() {
        assert_eq!(join_expression_answer("It must be", " Paris."), "It must be Paris.");
        assert_eq!(join_expression_answer("It must be", "Paris"), "It must be Paris");
        assert_eq!(join_expression_answer("It must be", "  "), "It must be");
    }

    proptest! {
        #[test]
        fn rendering_is_pure_and_question_appears_once(q in "[0-9]{3,10} zz[a-z ]{0,20}\\?", which in 0usize..4) {
            let exp = &crate::model::builtin_expressions()[which];
            let it = item(&q);
            let a = render_expression(&it, exp).unwrap();
            let b = render_expression(&it, exp).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.text.matches(q.as_str()).count(), 1);
            let s = render_standard(&it).unwrap();
            prop_assert_eq!(s.text.matches(q.as_str()).count(), 1);
        }
    }
}
