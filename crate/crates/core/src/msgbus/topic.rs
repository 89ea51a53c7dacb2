use std::fmt;
use std::str::FromStr;

use super::BusError;

const SEP: char = '/';

/// A subscription filter. `+` matches exactly one level, `#` one or more
/// trailing levels and may only appear last. `*` is accepted as an alias
/// for `+` so channel selectors like `*/temp` read naturally.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicFilter {
    raw: String,
    levels: Vec<Level>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Level {
    One,
    Rest,
    Name(String),
}

impl TopicFilter {
    pub fn parse(filter: &str) -> Result<Self, BusError> {
        if filter.is_empty() {
            return Err(BusError::BadFilter(filter.to_string()));
        }
        let parts: Vec<&str> = filter.split(SEP).collect();
        let mut levels = Vec::with_capacity(parts.len());
        for (i, part) in parts.iter().enumerate() {
            let level = match *part {
                "+" | "*" => Level::One,
                "#" if i + 1 == parts.len() => Level::Rest,
                _ if part.contains(['#', '+']) => return Err(BusError::BadFilter(filter.to_string())),
                name => Level::Name(name.to_string()),
            };
            levels.push(level);
        }
        Ok(TopicFilter {
            raw: filter.to_string(),
            levels,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn matches(&self, topic: &str) -> bool {
        let mut segments = topic.split(SEP);
        for level in &self.levels {
            match level {
                Level::Rest => return segments.next().is_some(),
                Level::One => {
                    if segments.next().is_none() {
                        return false;
                    }
                }
                Level::Name(name) => match segments.next() {
                    Some(seg) if seg == name => {}
                    _ => return false,
                },
            }
        }
        segments.next().is_none()
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

impl FromStr for TopicFilter {
    type Err = BusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopicFilter::parse(s)
    }
}

/// Checks a concrete topic name: non-empty and free of wildcards.
pub fn validate_topic(topic: &str) -> Result<(), BusError> {
    if topic.is_empty() || topic.contains(['#', '+', '*']) {
        return Err(BusError::BadTopic(topic.to_string()));
    }
    Ok(())
}

pub fn match_topic(filter: &str, topic: &str) -> Result<bool, BusError> {
    Ok(TopicFilter::parse(filter)?.matches(topic))
}
