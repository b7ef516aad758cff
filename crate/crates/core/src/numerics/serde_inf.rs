//! Serde helpers writing `+∞` as JSON `null`.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

fn encode(x: f64) -> Option<f64> {
    if x == f64::INFINITY {
        None
    } else {
        Some(x)
    }
}

fn decode(x: Option<f64>) -> f64 {
    x.unwrap_or(f64::INFINITY)
}

pub mod scalar {
    use super::*;

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        encode(*x).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Option::<f64>::deserialize(d).map(decode)
    }
}

pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<Option<f64>>> = m
            .iter()
            .map(|row| row.iter().copied().map(encode).collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let rows = Vec::<Vec<Option<f64>>>::deserialize(d)?;
        Ok(rows
            .into_iter()
            .map(|row| row.into_iter().map(decode).collect())
            .collect())
    }
}
