use std::fmt;
use std::str::FromStr;

use anyhow::{anyhow, bail};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use ssg_core::behavior::ModelKind;

pub const NON_MANIPULATE: &str = "nonManipulate";

/// One cell of the model-mismatch matrix.
///
/// `None` models mark the baseline where both players repeat the equilibrium.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ScenarioSpec {
    pub attacker_assumed: Option<ModelKind>,
    pub defender_actual: Option<ModelKind>,
    pub label: String,
}

impl ScenarioSpec {
    pub fn manipulate(assumed: ModelKind, actual: ModelKind) -> Self {
        ScenarioSpec {
            attacker_assumed: Some(assumed),
            defender_actual: Some(actual),
            label: format!("{assumed}vs{actual}"),
        }
    }

    pub fn non_manipulate() -> Self {
        ScenarioSpec {
            attacker_assumed: None,
            defender_actual: None,
            label: NON_MANIPULATE.to_string(),
        }
    }

    /// The nine assumed/actual pairs followed by the baseline.
    pub fn all() -> Vec<Self> {
        let mut out: Vec<Self> = ModelKind::ALL
            .iter()
            .flat_map(|&a| ModelKind::ALL.iter().map(move |&d| ScenarioSpec::manipulate(a, d)))
            .collect();
        out.push(ScenarioSpec::non_manipulate());
        out
    }

    pub fn is_baseline(&self) -> bool {
        self.attacker_assumed.is_none()
    }
}

impl fmt::Display for ScenarioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

impl FromStr for ScenarioSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        if s.eq_ignore_ascii_case(NON_MANIPULATE) {
            return Ok(ScenarioSpec::non_manipulate());
        }
        let Some((a, d)) = s.split_once("vs") else {
            bail!("scenario '{s}' is not of the form <assumed>vs<actual>");
        };
        let a = a.parse::<ModelKind>().map_err(|e| anyhow!("scenario '{s}': {e}"))?;
        let d = d.parse::<ModelKind>().map_err(|e| anyhow!("scenario '{s}': {e}"))?;
        Ok(ScenarioSpec::manipulate(a, d))
    }
}

impl Serialize for ScenarioSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.label)
    }
}

impl<'de> Deserialize<'de> for ScenarioSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
