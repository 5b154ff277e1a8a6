use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// First port of the function port plan. Each function listens on
/// `BASE_PORT + ordinal`.
pub const BASE_PORT: u16 = 62590;

/// A common service function that can be sliced into its own microservice.
///
/// Declaration order is the port ordinal: Registration 62590, Retrieve 62591,
/// Subscription 62592, Notification 62593, DataManagement 62594,
/// Discovery 62595.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionKind {
    Registration,
    Retrieve,
    Subscription,
    Notification,
    DataManagement,
    Discovery,
}

impl FunctionKind {
    pub const ALL: [FunctionKind; 6] = [
        FunctionKind::Registration,
        FunctionKind::Retrieve,
        FunctionKind::Subscription,
        FunctionKind::Notification,
        FunctionKind::DataManagement,
        FunctionKind::Discovery,
    ];

    pub fn ordinal(self) -> u16 {
        self as u16
    }

    pub fn port(self) -> u16 {
        BASE_PORT + self.ordinal()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FunctionKind::Registration => "registration",
            FunctionKind::Retrieve => "retrieve",
            FunctionKind::Subscription => "subscription",
            FunctionKind::Notification => "notification",
            FunctionKind::DataManagement => "data_management",
            FunctionKind::Discovery => "discovery",
        }
    }
}

impl fmt::Display for FunctionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown function kind `{0}`")]
pub struct UnknownFunction(pub String);

impl FromStr for FunctionKind {
    type Err = UnknownFunction;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        FunctionKind::ALL
            .into_iter()
            .find(|f| f.as_str() == norm || f.as_str().replace('_', "") == norm)
            .ok_or_else(|| UnknownFunction(s.to_owned()))
    }
}
