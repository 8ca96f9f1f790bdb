//! JSON float encoding with 17 significant digits (`{:.16e}`), which round-trips
//! every `f64` exactly. Non-finite values serialize as `null`.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn format(v: f64) -> String {
    format!("{v:.16e}")
}

fn number(v: f64) -> serde_json::Number {
    format(v).parse().expect("formatted float is a JSON number")
}

pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        number(*v).serialize(s)
    } else {
        s.serialize_none()
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

pub mod option {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_finite() => number(*x).serialize(s),
            _ => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Option::<f64>::deserialize(d)
    }
}

pub mod vec {
    use super::*;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            if x.is_finite() {
                seq.serialize_element(&number(*x))?;
            } else {
                seq.serialize_element(&Option::<f64>::None)?;
            }
        }
        seq.end()
    }
}

pub mod vec_option {
    use super::*;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(v: &[Option<f64>], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            match x {
                Some(x) if x.is_finite() => seq.serialize_element(&number(*x))?,
                _ => seq.serialize_element(&Option::<f64>::None)?,
            }
        }
        seq.end()
    }
}
