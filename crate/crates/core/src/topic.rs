//! The standardized transport topic scheme.
//!
//! Every topic has the shape
//! `pts/{region}/{method}/{travel_service}/{line_id}/{vehicle_id}/{channel}`
//! where `channel` is one of a closed set of one- or two-level paths.
//! Subscriptions use ordinary MQTT `+` / `#` wildcard filters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ROOT: &str = "pts";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopicError {
    #[error("topic must start with `{ROOT}/`")]
    WrongPrefix,
    #[error("expected 7 or 8 levels, found {0}")]
    WrongLevelCount(usize),
    #[error("empty level at position {0}")]
    EmptyLevel(usize),
    #[error("illegal character in level `{0}`")]
    IllegalCharacter(String),
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("wildcard mixed with other characters in level `{0}`")]
    PartialWildcard(String),
    #[error("`#` must be the last filter level")]
    MisplacedMultiWildcard,
    #[error("empty filter")]
    EmptyFilter,
}

/// One topic level: non-empty, lowercase `[a-z0-9-]+`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Token(String);

impl Token {
    pub fn new(s: impl Into<String>) -> Result<Self, TopicError> {
        let s = s.into();
        if s.is_empty() {
            return Err(TopicError::EmptyLevel(0));
        }
        if !s
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
        {
            return Err(TopicError::IllegalCharacter(s));
        }
        Ok(Token(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Token {
    type Error = TopicError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Token::new(s)
    }
}

impl From<Token> for String {
    fn from(t: Token) -> Self {
        t.0
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    TelemetryGps,
    Occupancy,
    TicketsTaps,
    Alarms,
    Status,
}

impl Channel {
    pub const ALL: [Channel; 5] = [
        Channel::TelemetryGps,
        Channel::Occupancy,
        Channel::TicketsTaps,
        Channel::Alarms,
        Channel::Status,
    ];

    pub fn path(&self) -> &'static str {
        match self {
            Channel::TelemetryGps => "telemetry/gps",
            Channel::Occupancy => "occupancy",
            Channel::TicketsTaps => "tickets/taps",
            Channel::Alarms => "alarms",
            Channel::Status => "status",
        }
    }

    fn from_levels(levels: &[&str]) -> Option<Channel> {
        match levels {
            ["telemetry", "gps"] => Some(Channel::TelemetryGps),
            ["occupancy"] => Some(Channel::Occupancy),
            ["tickets", "taps"] => Some(Channel::TicketsTaps),
            ["alarms"] => Some(Channel::Alarms),
            ["status"] => Some(Channel::Status),
            _ => None,
        }
    }
}

/// Parsed form of a concrete transport topic.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TopicAddress {
    pub region: Token,
    pub method: Token,
    pub travel_service: Token,
    pub line_id: Token,
    pub vehicle_id: Token,
    pub channel: Channel,
}

impl TopicAddress {
    pub fn new(
        region: &str,
        method: &str,
        travel_service: &str,
        line_id: &str,
        vehicle_id: &str,
        channel: Channel,
    ) -> Result<Self, TopicError> {
        Ok(TopicAddress {
            region: Token::new(region)?,
            method: Token::new(method)?,
            travel_service: Token::new(travel_service)?,
            line_id: Token::new(line_id)?,
            vehicle_id: Token::new(vehicle_id)?,
            channel,
        })
    }

    /// Same vehicle, different channel.
    pub fn with_channel(&self, channel: Channel) -> TopicAddress {
        TopicAddress {
            channel,
            ..self.clone()
        }
    }

    pub fn render(&self) -> String {
        render(self)
    }
}

impl fmt::Display for TopicAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{ROOT}/{}/{}/{}/{}/{}/{}",
            self.region,
            self.method,
            self.travel_service,
            self.line_id,
            self.vehicle_id,
            self.channel.path()
        )
    }
}

impl FromStr for TopicAddress {
    type Err = TopicError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

pub fn render(addr: &TopicAddress) -> String {
    addr.to_string()
}

pub fn parse(topic: &str) -> Result<TopicAddress, TopicError> {
    let levels: Vec<&str> = topic.split('/').collect();
    if levels[0] != ROOT {
        return Err(TopicError::WrongPrefix);
    }
    if let Some(i) = levels.iter().position(|l| l.is_empty()) {
        return Err(TopicError::EmptyLevel(i));
    }
    for level in &levels[1..] {
        Token::new(*level)?;
    }
    if levels.len() != 7 && levels.len() != 8 {
        return Err(TopicError::WrongLevelCount(levels.len()));
    }
    let channel = Channel::from_levels(&levels[6..])
        .ok_or_else(|| TopicError::UnknownChannel(levels[6..].join("/")))?;
    TopicAddress::new(
        levels[1], levels[2], levels[3], levels[4], levels[5], channel,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FilterLevel {
    Literal(String),
    /// `+`
    AnyOne,
    /// `#`, only ever last.
    AnyRest,
}

/// A subscription filter with MQTT wildcard semantics. Literal levels follow
/// MQTT rules rather than the `pts` token grammar, so `$SYS/#` or `a//b` are
/// accepted.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicFilter {
    levels: Vec<FilterLevel>,
}

impl TopicFilter {
    pub fn parse(s: &str) -> Result<Self, TopicError> {
        if s.is_empty() {
            return Err(TopicError::EmptyFilter);
        }
        let raw: Vec<&str> = s.split('/').collect();
        let mut levels = Vec::with_capacity(raw.len());
        for (i, level) in raw.iter().enumerate() {
            let parsed = match *level {
                "#" if i + 1 == raw.len() => FilterLevel::AnyRest,
                "#" => return Err(TopicError::MisplacedMultiWildcard),
                "+" => FilterLevel::AnyOne,
                lit if lit.contains(['+', '#']) => {
                    return Err(TopicError::PartialWildcard(lit.to_string()))
                }
                lit => FilterLevel::Literal(lit.to_string()),
            };
            levels.push(parsed);
        }
        Ok(TopicFilter { levels })
    }

    pub fn levels(&self) -> &[FilterLevel] {
        &self.levels
    }

    pub fn matches(&self, topic: &str) -> bool {
        matches(self, topic)
    }
}

impl FromStr for TopicFilter {
    type Err = TopicError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopicFilter::parse(s)
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, level) in self.levels.iter().enumerate() {
            if i > 0 {
                f.write_str("/")?;
            }
            match level {
                FilterLevel::Literal(t) => f.write_str(t)?,
                FilterLevel::AnyOne => f.write_str("+")?,
                FilterLevel::AnyRest => f.write_str("#")?,
            }
        }
        Ok(())
    }
}

/// MQTT 3.1.1 topic matching. `#` also matches the parent level
/// (`a/#` matches `a`), and wildcards in the first level never match topics
/// beginning with `$`.
pub fn matches(filter: &TopicFilter, topic: &str) -> bool {
    if topic.starts_with('$') && !matches!(filter.levels.first(), Some(FilterLevel::Literal(_))) {
        return false;
    }
    let mut topic_levels = topic.split('/');
    for level in &filter.levels {
        match level {
            FilterLevel::AnyRest => return true,
            FilterLevel::AnyOne => {
                if topic_levels.next().is_none() {
                    return false;
                }
            }
            FilterLevel::Literal(t) => match topic_levels.next() {
                Some(l) if l == t => {}
                _ => return false,
            },
        }
    }
    topic_levels.next().is_none()
}
