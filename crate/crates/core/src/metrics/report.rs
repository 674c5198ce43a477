use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Which side of the threshold passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accept {
    AtMost,
    AtLeast,
}

impl Accept {
    pub fn passes(self, value: f64, threshold: f64) -> bool {
        match self {
            Accept::AtMost => value <= threshold,
            Accept::AtLeast => value >= threshold,
        }
    }
}

/// One named measurement, optionally gated by a threshold.
///
/// Non-finite values are written to JSON as the strings `"inf"`, `"-inf"`
/// and `"nan"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub name: String,
    #[serde(serialize_with = "write_float", deserialize_with = "read_float")]
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accept: Option<Accept>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass: Option<bool>,
    pub sample_count: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn info(name: impl Into<String>, value: f64, sample_count: usize, seed: u64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold: None,
            accept: None,
            pass: None,
            sample_count,
            seed,
        }
    }

    pub fn gated(
        name: impl Into<String>,
        value: f64,
        threshold: f64,
        accept: Accept,
        sample_count: usize,
        seed: u64,
    ) -> Self {
        Self {
            name: name.into(),
            value,
            threshold: Some(threshold),
            accept: Some(accept),
            pass: Some(accept.passes(value, threshold)),
            sample_count,
            seed,
        }
    }

    /// A boolean check reported as value 1 (held) or 0 (failed).
    pub fn check(name: impl Into<String>, held: bool, sample_count: usize, seed: u64) -> Self {
        Self::gated(name, if held { 1.0 } else { 0.0 }, 1.0, Accept::AtLeast, sample_count, seed)
    }

    pub fn failed(&self) -> bool {
        self.pass == Some(false)
    }
}

fn write_float<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn read_float<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Text(t) => match t.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            other => Err(serde::de::Error::custom(format!("not a number: `{other}`"))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_follows_threshold() {
        assert_eq!(MetricReport::gated("a", 0.5, 1.0, Accept::AtMost, 1, 0).pass, Some(true));
        assert_eq!(MetricReport::gated("a", 1.5, 1.0, Accept::AtMost, 1, 0).pass, Some(false));
        assert_eq!(MetricReport::gated("a", 1.5, 1.0, Accept::AtLeast, 1, 0).pass, Some(true));
        let info = MetricReport::info("b", 2.0, 3, 4);
        assert!(info.pass.is_none() && info.threshold.is_none());
    }

    #[test]
    fn json_round_trip_with_infinity() {
        let reports = vec![
            MetricReport::info("nll", f64::INFINITY, 10, 1),
            MetricReport::gated("d", 0.25, 1.0, Accept::AtMost, 10, 1),
        ];
        let text = serde_json::to_string(&reports).unwrap();
        assert!(text.contains("\"inf\""));
        let back: Vec<MetricReport> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, reports);
        assert!(!text.contains("threshold\":null"));
    }
}
