use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Deserialize;

use crate::{Error, Result};

/// Short task name and long description used by the text baselines.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct Caption {
    pub simple: String,
    pub caption: String,
}

fn table() -> &'static BTreeMap<String, Caption> {
    static TABLE: OnceLock<BTreeMap<String, Caption>> = OnceLock::new();
    TABLE.get_or_init(|| toml::from_str(include_str!("../../data/captions.toml")).expect("bundled caption table parses"))
}

pub fn caption(key: &str) -> Result<&'static Caption> {
    table().get(key).ok_or_else(|| Error::Lookup { kind: "caption key", name: key.to_string() })
}

pub fn caption_keys() -> Vec<&'static str> {
    table().keys().map(String::as_str).collect()
}

/// Caption entry closest to a toy environment.
pub fn default_caption_key(env_id: &str) -> &'static str {
    match env_id {
        "press_pad" => "button_press",
        _ => "reacher",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_table() {
        assert_eq!(caption_keys().len(), 12);
        assert_eq!(caption("button_press").unwrap().simple, "button press");
        assert_eq!(
            caption("bin_picking").unwrap().caption,
            "The Sawyer robot arm must carefully pick a specific target object out of the cluttered red bin and place it into the empty blue bin."
        );
        assert!(caption("nope").is_err());
    }
}
