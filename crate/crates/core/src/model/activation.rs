use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// SELU scale λ.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// SELU negative-branch coefficient α.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

/// Pooler activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Selu,
    /// σ(x) = x³ + x².
    CubeSquare,
    Relu,
}

impl Activation {
    pub const ALL: [Activation; 4] = [Activation::Tanh, Activation::Selu, Activation::CubeSquare, Activation::Relu];

    /// σ⁽ᵒʳᵈᵉʳ⁾(x) for `order` in `0..=3`, evaluated pointwise.
    ///
    /// Piecewise activations use the right limit at their kink, and ReLU's
    /// derivatives at exactly 0 are 0. Orders above 3 return 0 for the
    /// polynomial and piecewise-linear cases and are not supported for tanh.
    pub fn eval(self, x: f64, order: u8) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                let s2 = 1.0 - t * t;
                match order {
                    0 => t,
                    1 => s2,
                    2 => -2.0 * t * s2,
                    3 => -2.0 * s2 * (1.0 - 3.0 * t * t),
                    _ => panic!("tanh derivative of order {order} not implemented"),
                }
            }
            Activation::Selu => {
                if x > 0.0 || (x == 0.0 && order > 0) {
                    match order {
                        0 => SELU_LAMBDA * x,
                        1 => SELU_LAMBDA,
                        _ => 0.0,
                    }
                } else {
                    let e = x.exp();
                    match order {
                        0 => SELU_LAMBDA * SELU_ALPHA * (e - 1.0),
                        _ => SELU_LAMBDA * SELU_ALPHA * e,
                    }
                }
            }
            Activation::CubeSquare => match order {
                0 => x * x * x + x * x,
                1 => 3.0 * x * x + 2.0 * x,
                2 => 6.0 * x + 2.0,
                3 => 6.0,
                _ => 0.0,
            },
            Activation::Relu => match order {
                0 => x.max(0.0),
                1 if x > 0.0 => 1.0,
                _ => 0.0,
            },
        }
    }

    /// Activations marked unusable for the moment estimators. ReLU's higher
    /// derivatives vanish almost everywhere. For tanh only the even-order
    /// estimator fails (tanh″ is odd, so E[tanh″(Z)] = 0); E[tanh‴(Z)] is
    /// about −0.36, so the flag is a policy for the original head rather
    /// than a statement about the third moment.
    pub fn zero_third_moment(self) -> bool {
        matches!(self, Activation::Tanh | Activation::Relu)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Selu => "selu",
            Activation::CubeSquare => "cube_square",
            Activation::Relu => "relu",
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "selu" => Ok(Activation::Selu),
            "cube_square" | "cubesquare" | "x3+x2" => Ok(Activation::CubeSquare),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        }
    }
}
