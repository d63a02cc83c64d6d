//! Generic scalar abstraction: every numeric routine in this crate is written
//! against [`Real`] so the same code runs in f32 (training speed) and f64
//! (gradient checks, statistics).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar usable throughout the crate: f32 or f64.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + rustfft::FftNum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64; panics only if the value is unrepresentable,
    /// which cannot happen for finite f64 into f32/f64.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Real")
    }

    /// Widening conversion to f64.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }

    fn from_usize_c(v: usize) -> Self {
        Self::from_usize(v).expect("usize converts to Real")
    }
}

impl Real for f32 {}
impl Real for f64 {}
