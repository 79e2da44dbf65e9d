use crate::error::{Error, Result};

use super::AttributeSpec;

/// Bumped whenever a template below changes; cached specs rendered with an
/// older version are treated as misses.
pub const TEMPLATE_VERSION: &str = "v1";

/// Sent as the system message with both spec prompts. The user prompts stay
/// exactly as rendered; this only asks for a layout the parsers read without
/// guessing.
pub const SPEC_SYSTEM_PREAMBLE: &str = "\
You help configure a workplace safety compliance checker.
When asked to list items, answer with one line per item, each item name in double quotes, \
for example: \"hard hat\", \"gloves\".
When asked to summarize visual features, answer with one section per item. Start each \
section with the item name followed by a colon on its own line, then exactly three lines:
color: <one color>
material: <one material>
functionality: <one functionality>";

pub fn render_items_prompt(scene: &str) -> Result<String> {
    let scene = scene.trim();
    if scene.is_empty() {
        return Err(Error::InvalidArgument("scene is empty".into()));
    }
    Ok(format!("List the items people should wear in a {scene}."))
}

pub fn render_attributes_prompt<S: AsRef<str>>(scene: &str, item_names: &[S]) -> Result<String> {
    if item_names.is_empty() {
        return Err(Error::InvalidArgument(
            "attribute prompt needs at least one item".into(),
        ));
    }
    let scene = scene.trim();
    if scene.is_empty() {
        return Err(Error::InvalidArgument("scene is empty".into()));
    }
    let quoted = item_names
        .iter()
        .map(|name| format!("\"{}\"", name.as_ref()))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(format!(
        "Summarize the required visual features of the [{quoted}] in a {scene}."
    ))
}

/// Text prompt for the wear check: `a person wearing {item}`.
pub fn render_wearing_prompt(item_name: &str) -> String {
    format!("a person wearing {item_name}")
}

/// Text prompt for attribute verification: `a {feature} {item}`. The article
/// is never adjusted to the noun.
pub fn render_attribute_prompt(attribute: &AttributeSpec, item_name: &str) -> String {
    format!("a {} {item_name}", attribute.phrase)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::safety_spec::ObservabilityClass;

    #[test]
    fn items_prompt_matches_template() {
        assert_eq!(
            render_items_prompt("seafood factory").unwrap(),
            "List the items people should wear in a seafood factory."
        );
        assert_eq!(
            render_items_prompt("hospital").unwrap(),
            "List the items people should wear in a hospital."
        );
        assert_eq!(
            render_items_prompt("construction site").unwrap(),
            "List the items people should wear in a construction site."
        );
        assert!(matches!(render_items_prompt(""), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn attributes_prompt_quotes_items() {
        let items = ["hairnet", "face mask", "gloves", "aprons", "boots"];
        assert_eq!(
            render_attributes_prompt("seafood factory", &items).unwrap(),
            r#"Summarize the required visual features of the ["hairnet", "face mask", "gloves", "aprons", "boots"] in a seafood factory."#
        );
        assert_eq!(
            render_attributes_prompt("hospital", &["gloves"]).unwrap(),
            r#"Summarize the required visual features of the ["gloves"] in a hospital."#
        );
        let none: [&str; 0] = [];
        assert!(matches!(
            render_attributes_prompt("x", &none),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn clip_prompts() {
        assert_eq!(render_wearing_prompt("hairnet"), "a person wearing hairnet");
        assert_eq!(render_wearing_prompt("gloves"), "a person wearing gloves");
        assert_eq!(
            render_wearing_prompt("high-visibility vest"),
            "a person wearing high-visibility vest"
        );
        let attr = |p| AttributeSpec::new(p, ObservabilityClass::Io).unwrap();
        assert_eq!(render_attribute_prompt(&attr("waterproof"), "boots"), "a waterproof boots");
        assert_eq!(render_attribute_prompt(&attr("latex"), "gloves"), "a latex gloves");
        assert_eq!(
            render_attribute_prompt(&attr("high-visibility"), "vest"),
            "a high-visibility vest"
        );
    }
}
