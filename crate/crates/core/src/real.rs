use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Floating point width used by the graph. `f64` is the wide mode used for
/// gradient checking; `f32` is the narrow training mode.
pub trait Real: Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static {
    const WIDTH: FloatWidth;

    fn lit(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f64 {
    const WIDTH: FloatWidth = FloatWidth::Wide;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
}

impl Real for f32 {
    const WIDTH: FloatWidth = FloatWidth::Narrow;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FloatWidth {
    /// 64-bit.
    #[default]
    Wide,
    /// 32-bit.
    Narrow,
}

impl FloatWidth {
    pub fn bytes(self) -> usize {
        match self {
            FloatWidth::Wide => 8,
            FloatWidth::Narrow => 4,
        }
    }
}
