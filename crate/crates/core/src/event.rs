//! User events and the positive-signal taxonomy shared by the simulator,
//! dataset builder, towers and objectives.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Feedback kinds that count as positive interactions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    Click,
    Cart,
    Fvrt,
    Prch,
}

impl Signal {
    pub const ALL: [Signal; 4] = [Signal::Click, Signal::Cart, Signal::Fvrt, Signal::Prch];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Signal::Click => "click",
            Signal::Cart => "cart",
            Signal::Fvrt => "fvrt",
            Signal::Prch => "prch",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn event_kind(self) -> EventKind {
        match self {
            Signal::Click => EventKind::Click,
            Signal::Cart => EventKind::AddToCart,
            Signal::Fvrt => EventKind::AddToFavorites,
            Signal::Prch => EventKind::Purchase,
        }
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-item labels for the four signals, indexed by [`Signal::index`].
pub type Labels = [bool; 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Click,
    AddToCart,
    AddToFavorites,
    Purchase,
    WebQuery,
}

impl EventKind {
    pub const ALL: [EventKind; 5] = [
        EventKind::Click,
        EventKind::AddToCart,
        EventKind::AddToFavorites,
        EventKind::Purchase,
        EventKind::WebQuery,
    ];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn signal(self) -> Option<Signal> {
        match self {
            EventKind::Click => Some(Signal::Click),
            EventKind::AddToCart => Some(Signal::Cart),
            EventKind::AddToFavorites => Some(Signal::Fvrt),
            EventKind::Purchase => Some(Signal::Prch),
            EventKind::WebQuery => None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EventError {
    #[error("web query event carries item id {0}")]
    QueryWithItem(u64),
    #[error("{0:?} event has no item id")]
    MissingItem(EventKind),
    #[error("{0:?} event has an empty text")]
    EmptyText(EventKind),
}

/// One timestamped interaction. Web queries carry the query text and no
/// item; every other kind carries the item id and its title.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub day: u32,
    pub kind: EventKind,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<u32>,
}

impl Event {
    pub fn validate(&self) -> Result<(), EventError> {
        match (self.kind, self.item) {
            (EventKind::WebQuery, Some(i)) => Err(EventError::QueryWithItem(i)),
            (EventKind::WebQuery, None) => Ok(()),
            (k, None) => Err(EventError::MissingItem(k)),
            (k, Some(_)) if self.text.trim().is_empty() => Err(EventError::EmptyText(k)),
            _ => Ok(()),
        }
    }
}
