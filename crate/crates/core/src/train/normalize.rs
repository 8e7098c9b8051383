//! Intensity normalization to the unit interval.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Normalization {
    /// Per-volume min-max over all channels; constant volumes become zeros.
    MinMax,
    /// Division by a fixed positive constant.
    Divide { by: f32 },
}

impl Default for Normalization {
    fn default() -> Self {
        Self::MinMax
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Divide { by } if !(by.is_finite() && by > 0.0) => {
                Err(Error::field("train.normalization", "divisor must be finite and > 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, vol: &Volume) -> Result<Volume> {
        self.validate()?;
        match *self {
            Self::MinMax => Ok(normalize(vol)),
            Self::Divide { by } => {
                let data = vol.data().iter().map(|v| v / by).collect();
                Volume::new(vol.channels(), vol.dims(), data)
            }
        }
    }
}

/// Maps the volume's value range affinely onto `[0, 1]`.
pub fn normalize(vol: &Volume) -> Volume {
    let (lo, hi) = vol
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi as f64 - lo as f64;
    let data = if range > 0.0 {
        vol.data()
            .iter()
            .map(|&v| ((v as f64 - lo as f64) / range) as f32)
            .collect()
    } else {
        vec![0.0; vol.data().len()]
    };
    Volume::new(vol.channels(), vol.dims(), data).expect("normalization preserves shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(values: Vec<f32>) -> Volume {
        Volume::new(1, [1, 1, values.len()], values).unwrap()
    }

    #[test]
    fn byte_range_maps_to_unit() {
        let v = normalize(&line((0..256).map(|v| v as f32).collect()));
        assert_eq!(v.data()[0], 0.0);
        assert_eq!(v.data()[255], 1.0);
        assert_eq!(v.data()[51], 0.2);
    }

    #[test]
    fn constant_becomes_zero() {
        assert!(normalize(&line(vec![4.0; 5])).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_map() {
        assert_eq!(normalize(&line(vec![-2.0, 0.0, 2.0])).data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn divide_mode() {
        let n = Normalization::Divide { by: 4.0 };
        assert_eq!(n.apply(&line(vec![2.0, 4.0])).unwrap().data(), &[0.5, 1.0]);
        assert!(Normalization::Divide { by: 0.0 }.apply(&line(vec![1.0])).is_err());
    }
}
